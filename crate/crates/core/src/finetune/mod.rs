//! Source pre-training and episode fine-tuning.

mod mode;
mod pretrain;
mod train;

pub use mode::{StageUpdate, UpdateMode};
pub use pretrain::{lr_at_epoch, pretrain, PretrainConfig, Pretrained};
pub use train::{finetune_episode, train_epochs, FineTuned, TrainState};

use crate::augment::AugPolicy;
use crate::error::{Error, Result};
use crate::model::SgdConfig;

/// Epoch window `[start, end]` (1-indexed, inclusive) in which augmentation
/// is applied; `None` disables augmentation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Schedule {
    pub aug_epochs: Option<(usize, usize)>,
}

impl Schedule {
    pub fn none() -> Self {
        Schedule { aug_epochs: None }
    }

    pub fn window(start: usize, end: usize) -> Self {
        Schedule {
            aug_epochs: Some((start, end)),
        }
    }

    pub fn all(epochs: usize) -> Self {
        Self::window(1, epochs)
    }

    pub fn validate(&self, epochs: usize) -> Result<()> {
        if let Some((s, e)) = self.aug_epochs {
            if s < 1 || s > e || e > epochs {
                return Err(Error::invalid(format!(
                    "augmentation window [{s}, {e}] must satisfy 1 <= start <= end <= {epochs}"
                )));
            }
        }
        Ok(())
    }
}

/// Whether augmentation is on at 1-indexed `epoch`.
pub fn da_active(epoch: usize, schedule: &Schedule) -> bool {
    schedule
        .aug_epochs
        .is_some_and(|(s, e)| s <= epoch && epoch <= e)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FineTuneConfig {
    pub mode: UpdateMode,
    pub sgd: SgdConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub da_policy: AugPolicy,
    pub schedule: Schedule,
}

impl FineTuneConfig {
    pub const SGD: SgdConfig = SgdConfig {
        lr: 1e-2,
        momentum: 0.9,
        weight_decay: 1e-3,
    };
    pub const EPOCHS: usize = 100;

    /// Default batch size for `k` shots: 16 from 20 shots up, 4 below.
    pub fn batch_size_for_shots(k: usize) -> usize {
        if k >= 20 {
            16
        } else {
            4
        }
    }

    /// Standard hyperparameters without augmentation.
    pub fn new(mode: UpdateMode, k: usize) -> Self {
        FineTuneConfig {
            mode,
            sgd: Self::SGD,
            epochs: Self::EPOCHS,
            batch_size: Self::batch_size_for_shots(k),
            da_policy: AugPolicy::none(),
            schedule: Schedule::none(),
        }
    }

    /// Augment with `policy` in every epoch.
    pub fn with_da(mut self, policy: AugPolicy) -> Self {
        self.schedule = Schedule::all(self.epochs);
        self.da_policy = policy;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.mode.validate(self.epochs)?;
        self.schedule.validate(self.epochs)?;
        self.da_policy.validate()?;
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if self.batch_size < 2 && self.trains_extractor() {
            return Err(Error::BatchTooSmall(self.batch_size));
        }
        Ok(())
    }

    /// True when some epoch updates extractor parameters (train-mode BN).
    pub fn trains_extractor(&self) -> bool {
        match self.mode {
            UpdateMode::LP | UpdateMode::Partial(0) => false,
            UpdateMode::TwoStage { first, second, .. } => {
                first == StageUpdate::FT || second == StageUpdate::FT
            }
            _ => true,
        }
    }
}

/// Per-epoch record of one fine-tuning run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainTrace {
    /// Mean training loss of each epoch.
    pub losses: Vec<f64>,
    /// Eval-mode query accuracy after each epoch.
    pub query_acc: Vec<f64>,
    /// Augmentation streams forked in each epoch.
    pub aug_streams: Vec<usize>,
    /// Words drawn from each epoch's shuffle stream.
    pub shuffle_draws: Vec<u64>,
}

impl TrainTrace {
    pub fn epochs(&self) -> usize {
        self.losses.len()
    }

    pub fn acc_last(&self) -> Option<f64> {
        self.query_acc.last().copied()
    }

    /// Best accuracy and its 1-indexed epoch (earliest on ties).
    pub fn best(&self) -> Option<(f64, usize)> {
        let mut best: Option<(f64, usize)> = None;
        for (i, &a) in self.query_acc.iter().enumerate() {
            if best.is_none_or(|(b, _)| a > b) {
                best = Some((a, i + 1));
            }
        }
        best
    }
}
