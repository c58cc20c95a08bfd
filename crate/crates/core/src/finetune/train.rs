use std::ops::RangeInclusive;

use super::{da_active, FineTuneConfig, TrainTrace};
use crate::augment::{apply_policy, mix_from_pool, AugKind, Image, MixSample};
use crate::episodes::Episode;
use crate::error::Result;
use crate::evaluate::{accuracy, predict_logits};
use crate::model::{
    batch_tensor, first_trainable_stage, freeze_mask, init_head, layers, loss_and_backward,
    softmax_cross_entropy, FeatureExtractor, LinearHead, Mode, Network, OptState, ParamGroupIndex,
    Target,
};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// A network mid fine-tuning together with its optimizer and trace.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub net: Network,
    pub opt: OptState,
    pub trace: TrainTrace,
}

impl TrainState {
    pub fn new(net: Network, cfg: &FineTuneConfig) -> Self {
        let opt = OptState::new(&net, cfg.sgd);
        TrainState {
            net,
            opt,
            trace: TrainTrace::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct FineTuned {
    /// Head the episode started from.
    pub initial_head: LinearHead,
    pub model: Network,
    pub trace: TrainTrace,
}

/// Fine-tunes a fresh copy of `pretrained` on the episode's support set.
///
/// `rng` is the episode stream: the new head comes from `rng.child("head")`
/// and training from `rng.child("train")`, so runs that differ only in
/// update mode or augmentation share the head and the batch order.
pub fn finetune_episode(
    pretrained: &FeatureExtractor,
    episode: &Episode,
    cfg: &FineTuneConfig,
    rng: &RngStream,
) -> Result<FineTuned> {
    cfg.validate()?;
    let head = init_head(pretrained.feature_dim(), episode.n_way(), &rng.child("head"))?;
    let net = Network::new(pretrained.clone(), head.clone())?;
    let mut state = TrainState::new(net, cfg);
    train_epochs(&mut state, episode, cfg, 1..=cfg.epochs, &rng.child("train"))?;
    Ok(FineTuned {
        initial_head: head,
        model: state.net,
        trace: state.trace,
    })
}

/// Eval-mode features that stay valid while the extractor is unchanged.
#[derive(Default)]
struct FeatureCache {
    support: Option<Tensor>,
    query: Option<Tensor>,
}

/// Runs the given 1-indexed epochs. Epoch `e` draws its batch order from
/// `rng.child_idx("epoch", e).child("shuffle")` and its augmentation from
/// `.child("aug")`, so a run can be split into consecutive calls without
/// changing the result.
pub fn train_epochs(
    state: &mut TrainState,
    episode: &Episode,
    cfg: &FineTuneConfig,
    epochs: RangeInclusive<usize>,
    rng: &RngStream,
) -> Result<()> {
    let index = ParamGroupIndex::new(state.net.config());
    let stages = state.net.config().stages();
    let support: Vec<(Image, usize)> = episode.support_pairs();
    let mut cache = FeatureCache::default();
    for epoch in epochs {
        let mode = cfg.mode.at_epoch(epoch);
        let mask = freeze_mask(mode, &index)?;
        let first = first_trainable_stage(&mask, stages);
        let head_only = first == stages;
        let augment = da_active(epoch, &cfg.schedule) && cfg.da_policy.kind != AugKind::None;

        let erng = rng.child_idx("epoch", epoch as u64);
        let mut shuffle = erng.child("shuffle");
        let mut order: Vec<usize> = (0..support.len()).collect();
        shuffle.shuffle(&mut order);
        let batches = split_batches(&order, cfg.batch_size, !head_only);

        let aug = erng.child("aug");
        let mut aug_streams = 0;
        let pool: Vec<(Image, usize)> = if augment && cfg.da_policy.is_mixing() {
            order.iter().map(|&i| support[i].clone()).collect()
        } else {
            Vec::new()
        };

        let mut loss_sum = 0.0;
        for (b, batch) in batches.iter().enumerate() {
            let (loss, grads) = if head_only && !augment {
                let feats = cache_support(&mut cache, &state.net, &support)?;
                let rows = gather_rows(feats, batch);
                let targets: Vec<Target> = batch.iter().map(|&i| Target::hard(support[i].1)).collect();
                head_step(&state.net, &rows, &targets, index.len())?
            } else {
                let samples: Vec<MixSample> = if augment {
                    aug_streams += 1;
                    let brng = aug.child_idx("batch", b as u64);
                    if cfg.da_policy.is_mixing() {
                        mix_from_pool(&cfg.da_policy, &pool, batch.len(), &brng)?
                    } else {
                        let items: Vec<(Image, usize)> = batch.iter().map(|&i| support[i].clone()).collect();
                        apply_policy(&cfg.da_policy, &items, &brng)?
                    }
                } else {
                    batch
                        .iter()
                        .map(|&i| MixSample::plain(support[i].0.clone(), support[i].1))
                        .collect()
                };
                let images: Vec<&Image> = samples.iter().map(|s| &s.image).collect();
                let targets: Vec<Target> = samples.iter().map(Target::from).collect();
                let x = batch_tensor::<f32>(&images)?;
                if head_only {
                    let feats = state.net.extractor.features(&x)?;
                    head_step(&state.net, &feats, &targets, index.len())?
                } else {
                    let fw = state.net.forward(&x, Mode::TrainFrom(first))?;
                    loss_and_backward(&state.net, &fw, &targets, &mask)?
                }
            };
            state.opt.step(&mut state.net, &grads, &mask)?;
            loss_sum += loss * batch.len() as f64;
        }
        if !head_only {
            cache = FeatureCache::default();
        }

        state.trace.losses.push(loss_sum / support.len() as f64);
        if !episode.query.is_empty() {
            let qf = cache_query(&mut cache, &state.net, &episode.query)?;
            let preds = predict_logits(&state.net.head.logits(qf));
            state.trace.query_acc.push(accuracy(&preds, &episode.query_labels));
        }
        state.trace.aug_streams.push(aug_streams);
        state.trace.shuffle_draws.push(shuffle.draws());
    }
    Ok(())
}

/// Consecutive chunks of `order`. When batch norm trains, a trailing batch
/// smaller than half the batch size is folded into the previous batch: its
/// statistics are too noisy and would land in the running statistics right
/// before evaluation.
pub(super) fn split_batches(order: &[usize], batch_size: usize, bn_trains: bool) -> Vec<Vec<usize>> {
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if bn_trains && batches.len() > 1 && batches.last().is_some_and(|b| b.len() < 2 || 2 * b.len() < batch_size) {
        let last = batches.pop().expect("non-empty");
        batches.last_mut().expect("non-empty").extend(last);
    }
    batches
}

fn cache_support<'a>(cache: &'a mut FeatureCache, net: &Network, support: &[(Image, usize)]) -> Result<&'a Tensor> {
    if cache.support.is_none() {
        let imgs: Vec<&Image> = support.iter().map(|(im, _)| im).collect();
        cache.support = Some(net.extractor.features_of(&imgs)?);
    }
    Ok(cache.support.as_ref().expect("filled above"))
}

fn cache_query<'a>(cache: &'a mut FeatureCache, net: &Network, query: &[Image]) -> Result<&'a Tensor> {
    if cache.query.is_none() {
        let imgs: Vec<&Image> = query.iter().collect();
        cache.query = Some(net.extractor.features_of(&imgs)?);
    }
    Ok(cache.query.as_ref().expect("filled above"))
}

fn gather_rows(t: &Tensor, rows: &[usize]) -> Tensor {
    let d = t.shape()[1];
    let mut data = Vec::with_capacity(rows.len() * d);
    for &r in rows {
        data.extend_from_slice(&t.data()[r * d..(r + 1) * d]);
    }
    Tensor::from_vec(&[rows.len(), d], data).expect("row length matches")
}

/// Loss and gradients when only the classifier trains. Frozen groups get
/// empty placeholders; the optimizer skips them.
fn head_step(net: &Network, feats: &Tensor, targets: &[Target], groups: usize) -> Result<(f64, Vec<Tensor>)> {
    let logits = net.head.logits(feats);
    let (loss, dlogits) = softmax_cross_entropy(&logits, targets)?;
    let (n, d) = (feats.shape()[0], feats.shape()[1]);
    let k = net.head.n_classes();
    let (_, dw, db) = layers::linear_backward(feats.data(), net.head.weight.data(), dlogits.data(), n, d, k);
    let mut grads: Vec<Tensor> = (0..groups - 2).map(|_| Tensor::zeros(&[0])).collect();
    grads.push(Tensor::from_vec(&[k, d], dw)?);
    grads.push(Tensor::from_vec(&[k], db)?);
    Ok((loss, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::{AugPolicy, IntensityPreset, MixMode};
    use crate::episodes::{sample_episode, Dataset, EpisodeSpec};
    use crate::finetune::{Schedule, StageUpdate, UpdateMode};
    use crate::model::{init_extractor, ModelConfig};

    const CFG: ModelConfig = ModelConfig {
        base_width: 4,
        blocks: 2,
    };

    fn data() -> Dataset {
        let mut images = Vec::new();
        let mut labels = Vec::new();
        let mut rng = RngStream::new(77);
        for c in 0..5 {
            for _ in 0..8 {
                let px = (0..8 * 8 * 3)
                    .map(|p| {
                        let base = if (p / 3) % 5 == c { 0.8 } else { 0.2 };
                        (base + 0.1 * rng.uniform()) as f32
                    })
                    .collect();
                images.push(Image::new(8, 8, px).unwrap());
                labels.push(c);
            }
        }
        Dataset::new(images, labels, 5, "toy").unwrap()
    }

    fn setup(k: usize) -> (FeatureExtractor, Episode) {
        let ext = init_extractor(CFG, &RngStream::new(5));
        let ds = data();
        let ep = sample_episode(&ds, EpisodeSpec::new(5, k, 3).unwrap(), &mut RngStream::new(6)).unwrap();
        (ext, ep)
    }

    fn cfg(mode: UpdateMode, epochs: usize) -> FineTuneConfig {
        FineTuneConfig {
            epochs,
            ..FineTuneConfig::new(mode, 2)
        }
    }

    #[test]
    fn lp_keeps_extractor_bit_identical() {
        let (ext, ep) = setup(2);
        let mut c = cfg(UpdateMode::LP, 6).with_da(AugPolicy::base_aug(IntensityPreset::Strong));
        c.schedule = Schedule::window(2, 4);
        let out = finetune_episode(&ext, &ep, &c, &RngStream::new(1)).unwrap();
        assert_eq!(out.model.extractor, ext);
        assert_ne!(out.model.head, out.initial_head);
        assert_eq!(out.trace.epochs(), 6);
    }

    #[test]
    fn partial_zero_equals_lp() {
        let (ext, ep) = setup(2);
        let rng = RngStream::new(2);
        let a = finetune_episode(&ext, &ep, &cfg(UpdateMode::LP, 5), &rng).unwrap();
        let b = finetune_episode(&ext, &ep, &cfg(UpdateMode::Partial(0), 5), &rng).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.trace, b.trace);
    }

    #[test]
    fn two_stage_composes() {
        let (ext, ep) = setup(2);
        let rng = RngStream::new(3);
        let two = UpdateMode::TwoStage {
            first: StageUpdate::LP,
            second: StageUpdate::FT,
            switch_epoch: 3,
        };
        let whole = finetune_episode(&ext, &ep, &cfg(two, 6), &rng).unwrap();

        let head = init_head(ext.feature_dim(), 5, &rng.child("head")).unwrap();
        let lp = cfg(UpdateMode::LP, 6);
        let ft = cfg(UpdateMode::FT, 6);
        let mut state = TrainState::new(Network::new(ext.clone(), head).unwrap(), &lp);
        train_epochs(&mut state, &ep, &lp, 1..=3, &rng.child("train")).unwrap();
        train_epochs(&mut state, &ep, &ft, 4..=6, &rng.child("train")).unwrap();
        assert_eq!(state.net, whole.model);
        assert_eq!(state.trace, whole.trace);
    }

    #[test]
    fn ft_changes_extractor_and_fits_support() {
        let (ext, ep) = setup(2);
        let out = finetune_episode(&ext, &ep, &cfg(UpdateMode::FT, 30), &RngStream::new(4)).unwrap();
        assert_ne!(out.model.extractor, ext);
        let l = &out.trace.losses;
        assert!(l.last().unwrap() < &l[0]);
    }

    #[test]
    fn zero_epochs_is_empty_trace() {
        let (ext, ep) = setup(1);
        let out = finetune_episode(&ext, &ep, &cfg(UpdateMode::FT, 0), &RngStream::new(4)).unwrap();
        assert_eq!(out.trace.epochs(), 0);
        assert_eq!(out.model.head, out.initial_head);
    }

    #[test]
    fn scheduled_epochs_draw_no_augmentation() {
        let (ext, ep) = setup(2);
        let rng = RngStream::new(8);
        let mut c = cfg(UpdateMode::FT, 10).with_da(AugPolicy::mixing(AugKind::MixUp, MixMode::WB));
        c.schedule = Schedule::window(4, 7);
        let with = finetune_episode(&ext, &ep, &c, &rng).unwrap().trace;
        let without = finetune_episode(&ext, &ep, &cfg(UpdateMode::FT, 10), &rng).unwrap().trace;
        for e in 0..10 {
            let inside = (3..7).contains(&e);
            assert_eq!(with.aug_streams[e] > 0, inside, "epoch {}", e + 1);
        }
        assert_eq!(with.shuffle_draws, without.shuffle_draws);
        assert_eq!(with.losses[..3], without.losses[..3]);
        assert_eq!(with.query_acc[..3], without.query_acc[..3]);
    }

    #[test]
    fn small_trailing_batches_merge_only_when_bn_trains() {
        let order: Vec<usize> = (0..5).collect();
        assert_eq!(split_batches(&order, 4, true), vec![vec![0, 1, 2, 3, 4]]);
        assert_eq!(split_batches(&order, 4, false).len(), 2);
        assert_eq!(split_batches(&order, 2, true), vec![vec![0, 1], vec![2, 3, 4]]);
        let hundred: Vec<usize> = (0..100).collect();
        let b = split_batches(&hundred, 16, true);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![16, 16, 16, 16, 16, 20]);
        assert_eq!(split_batches(&hundred, 16, false).len(), 7);
        assert_eq!(split_batches(&order[..3], 4, true), vec![vec![0, 1, 2]]);
    }

    #[test]
    fn within_class_mixing_needs_two_shots() {
        let (ext, ep) = setup(1);
        let c = cfg(UpdateMode::LP, 2).with_da(AugPolicy::mixing(AugKind::MixUp, MixMode::W));
        assert!(finetune_episode(&ext, &ep, &c, &RngStream::new(1)).is_err());
    }
}
