use super::train::split_batches;
use super::TrainTrace;
use crate::augment::{apply_policy, AugPolicy, Image, IntensityPreset};
use crate::episodes::Dataset;
use crate::error::{Error, Result};
use crate::evaluate::{accuracy, predict_logits};
use crate::model::{
    batch_tensor, init_extractor, init_head, loss_and_backward, ModelConfig, Mode, Network,
    OptState, SgdConfig, Target,
};
use crate::rng::RngStream;

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub model: ModelConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub sgd: SgdConfig,
    /// Epoch fractions after which the learning rate is multiplied by `gamma`.
    pub milestones: Vec<f64>,
    pub gamma: f64,
    pub aug: AugPolicy,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            model: ModelConfig::default(),
            epochs: 60,
            batch_size: 64,
            sgd: SgdConfig {
                lr: 0.1,
                momentum: 0.9,
                weight_decay: 1e-4,
            },
            milestones: vec![0.6, 0.8],
            gamma: 0.1,
            aug: AugPolicy::base_aug(IntensityPreset::Default),
        }
    }
}

/// Learning rate at 1-indexed `epoch`: decayed once for every milestone
/// epoch `round(m·epochs)` already completed.
pub fn lr_at_epoch(cfg: &PretrainConfig, epoch: usize) -> f64 {
    let passed = cfg
        .milestones
        .iter()
        .filter(|&&m| epoch > (m * cfg.epochs as f64).round() as usize)
        .count();
    cfg.sgd.lr * cfg.gamma.powi(passed as i32)
}

#[derive(Clone, Debug)]
pub struct Pretrained {
    /// Extractor plus the source head (callers replace the head).
    pub net: Network,
    /// Loss per epoch; `query_acc` is unused.
    pub trace: TrainTrace,
    /// Eval-mode accuracy on the un-augmented source set.
    pub train_accuracy: f64,
}

/// Trains extractor and source head from scratch. Initial weights come from
/// `rng.child("init")`; epoch `e` shuffles with
/// `rng.child_idx("epoch", e).child("shuffle")` and augments batch `b` with
/// `.child("aug").child_idx("batch", b)`.
pub fn pretrain(source: &Dataset, cfg: &PretrainConfig, rng: &RngStream) -> Result<Pretrained> {
    if source.n_classes() < 2 {
        return Err(Error::invalid("pre-training needs at least 2 source classes"));
    }
    if cfg.batch_size < 2 {
        return Err(Error::BatchTooSmall(cfg.batch_size));
    }
    if cfg.aug.is_mixing() {
        return Err(Error::invalid("pre-training augmentation must be a single-image policy"));
    }
    cfg.model.validate()?;
    let init = rng.child("init");
    let ext = init_extractor(cfg.model, &init.child("extractor"));
    let head = init_head(cfg.model.feature_dim(), source.n_classes(), &init.child("head"))?;
    let mut net = Network::new(ext, head)?;
    let mut opt = OptState::new(&net, cfg.sgd);
    let mask = vec![true; net.params().len()];
    let mut trace = TrainTrace::default();
    let items: Vec<(Image, usize)> = source
        .images()
        .iter()
        .cloned()
        .zip(source.labels().iter().copied())
        .collect();

    for epoch in 1..=cfg.epochs {
        opt.hp.lr = lr_at_epoch(cfg, epoch);
        let erng = rng.child_idx("epoch", epoch as u64);
        let mut order: Vec<usize> = (0..items.len()).collect();
        erng.child("shuffle").shuffle(&mut order);
        let aug = erng.child("aug");
        let mut loss_sum = 0.0;
        for (b, chunk) in split_batches(&order, cfg.batch_size, true).iter().enumerate() {
            let batch: Vec<(Image, usize)> = chunk.iter().map(|&i| items[i].clone()).collect();
            let samples = apply_policy(&cfg.aug, &batch, &aug.child_idx("batch", b as u64))?;
            let images: Vec<&Image> = samples.iter().map(|s| &s.image).collect();
            let targets: Vec<Target> = samples.iter().map(Target::from).collect();
            let x = batch_tensor::<f32>(&images)?;
            let fw = net.forward(&x, Mode::Train)?;
            let (loss, grads) = loss_and_backward(&net, &fw, &targets, &mask)?;
            opt.step(&mut net, &grads, &mask)?;
            loss_sum += loss * chunk.len() as f64;
        }
        trace.losses.push(loss_sum / items.len() as f64);
    }

    let imgs: Vec<&Image> = source.images().iter().collect();
    let feats = net.extractor.features_of(&imgs)?;
    let preds = predict_logits(&net.head.logits(&feats));
    let train_accuracy = accuracy(&preds, source.labels());
    Ok(Pretrained {
        net,
        trace,
        train_accuracy,
    })
}
