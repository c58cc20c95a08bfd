use super::layers::{self, BN_MOMENTUM};
use crate::augment::{Image, CHANNELS};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::{Scalar, Tensor};

/// Architecture of the desk-scale extractor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ModelConfig {
    /// Output channels of the stem; each block doubles the width.
    pub base_width: usize,
    /// Number of conv-BN-ReLU-pool blocks after the stem.
    pub blocks: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            base_width: 16,
            blocks: 3,
        }
    }
}

impl ModelConfig {
    pub fn feature_dim(&self) -> usize {
        self.base_width << self.blocks
    }

    /// Stem plus blocks.
    pub fn stages(&self) -> usize {
        self.blocks + 1
    }

    fn stage_channels(&self, stage: usize) -> (usize, usize) {
        if stage == 0 {
            (CHANNELS, self.base_width)
        } else {
            let cin = self.base_width << (stage - 1);
            (cin, 2 * cin)
        }
    }

    /// Input side lengths must survive `blocks` halvings.
    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let d = 1usize << self.blocks;
        if h == 0 || w == 0 || h % d != 0 || w % d != 0 {
            return Err(Error::invalid(format!(
                "input {h}x{w} must be a positive multiple of {d} for {} pooling blocks",
                self.blocks
            )));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_width == 0 || self.blocks == 0 || self.blocks > 6 {
            return Err(Error::invalid(format!("unsupported model config {self:?}")));
        }
        Ok(())
    }
}

/// Batch-norm parameters and running statistics for one stage.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm<F: Scalar = f32> {
    pub scale: Tensor<F>,
    pub shift: Tensor<F>,
    pub running_mean: Tensor<F>,
    pub running_var: Tensor<F>,
}

impl<F: Scalar> BatchNorm<F> {
    fn new(c: usize) -> Self {
        BatchNorm {
            scale: Tensor::filled(&[c], F::one()),
            shift: Tensor::zeros(&[c]),
            running_mean: Tensor::zeros(&[c]),
            running_var: Tensor::filled(&[c], F::one()),
        }
    }
}

/// 3×3 convolution (no bias) followed by batch norm; weight stored
/// `[9·cin, cout]` with rows in `(ky, kx, cin)` order.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBn<F: Scalar = f32> {
    pub cin: usize,
    pub cout: usize,
    pub weight: Tensor<F>,
    pub bn: BatchNorm<F>,
}

/// Stem conv-BN-ReLU, then `blocks` × (conv-BN-ReLU-avgpool), then global
/// average pooling.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractor<F: Scalar = f32> {
    pub config: ModelConfig,
    pub stages: Vec<ConvBn<F>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearHead<F: Scalar = f32> {
    /// `[n_classes, dim]`
    pub weight: Tensor<F>,
    pub bias: Tensor<F>,
}

/// Extractor plus linear classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct Network<F: Scalar = f32> {
    pub extractor: FeatureExtractor<F>,
    pub head: LinearHead<F>,
}

fn uniform_tensor<F: Scalar>(shape: &[usize], bound: f64, rng: &mut RngStream) -> Tensor<F> {
    let len = shape.iter().product();
    let data = (0..len).map(|_| F::of_f64(rng.uniform_in(-bound, bound))).collect();
    Tensor::from_vec(shape, data).expect("length matches shape")
}

/// Conv weights uniform in `±1/√fan_in`; BN scale 1, shift 0, running mean
/// 0, running variance 1.
pub fn init_extractor<F: Scalar>(config: ModelConfig, rng: &RngStream) -> FeatureExtractor<F> {
    let stages = (0..config.stages())
        .map(|s| {
            let (cin, cout) = config.stage_channels(s);
            let fan_in = 9 * cin;
            let mut r = rng.child_idx("conv", s as u64);
            ConvBn {
                cin,
                cout,
                weight: uniform_tensor(&[fan_in, cout], 1.0 / (fan_in as f64).sqrt(), &mut r),
                bn: BatchNorm::new(cout),
            }
        })
        .collect();
    FeatureExtractor { config, stages }
}

/// Weight and bias uniform in `±1/√dim`.
pub fn init_head<F: Scalar>(dim: usize, n_classes: usize, rng: &RngStream) -> Result<LinearHead<F>> {
    if dim == 0 || n_classes == 0 {
        return Err(Error::invalid("head needs dim >= 1 and n_classes >= 1"));
    }
    let bound = 1.0 / (dim as f64).sqrt();
    let mut r = rng.child("head");
    Ok(LinearHead {
        weight: uniform_tensor(&[n_classes, dim], bound, &mut r),
        bias: uniform_tensor(&[n_classes], bound, &mut r),
    })
}

impl<F: Scalar> LinearHead<F> {
    pub fn n_classes(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn logits(&self, features: &Tensor<F>) -> Tensor<F> {
        let n = features.shape()[0];
        let (k, d) = (self.n_classes(), self.dim());
        let out = layers::linear_forward(features.data(), self.weight.data(), self.bias.data(), n, d, k);
        Tensor::from_vec(&[n, k], out).expect("logits shape")
    }
}

/// How batch norm behaves per stage during a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Every stage uses batch statistics and updates running statistics.
    Train,
    /// Every stage uses running statistics.
    Eval,
    /// Stages `>= first_train_stage` train, lower stages run in eval mode.
    TrainFrom(usize),
}

impl Mode {
    fn first_train_stage(self, stages: usize) -> usize {
        match self {
            Mode::Train => 0,
            Mode::Eval => stages,
            Mode::TrainFrom(s) => s.min(stages),
        }
    }
}

pub(crate) struct StageCache<F> {
    h: usize,
    w: usize,
    cols: Vec<F>,
    xhat: Vec<F>,
    inv_std: Vec<F>,
    /// Post-ReLU activation (before pooling).
    act: Vec<F>,
}

/// Intermediates retained by a forward pass for [`Network::backward`].
pub struct ForwardCache<F: Scalar> {
    n: usize,
    first_train_stage: usize,
    stages: Vec<Option<StageCache<F>>>,
    /// Spatial size of the last stage output (input to global pooling).
    final_hw: (usize, usize),
    features: Tensor<F>,
}

impl<F: Scalar> ForwardCache<F> {
    pub fn batch_size(&self) -> usize {
        self.n
    }

    pub fn features(&self) -> &Tensor<F> {
        &self.features
    }
}

pub struct Forward<F: Scalar> {
    pub features: Tensor<F>,
    pub logits: Tensor<F>,
    pub cache: ForwardCache<F>,
}

/// Stacks images into an NHWC batch tensor.
pub fn batch_tensor<F: Scalar>(images: &[&Image]) -> Result<Tensor<F>> {
    let first = images
        .first()
        .ok_or_else(|| Error::invalid("empty image batch"))?;
    let (h, w) = first.dims();
    let mut data = Vec::with_capacity(images.len() * h * w * CHANNELS);
    for img in images {
        first.same_shape(img)?;
        data.extend(img.data().iter().map(|&v| F::of_f64(v as f64)));
    }
    Tensor::from_vec(&[images.len(), h, w, CHANNELS], data)
}

impl<F: Scalar> FeatureExtractor<F> {
    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim()
    }

    fn check_batch(&self, x: &Tensor<F>) -> Result<(usize, usize, usize)> {
        let s = x.shape();
        if s.len() != 4 || s[3] != CHANNELS {
            return Err(Error::ShapeMismatch {
                expected: vec![0, 0, 0, CHANNELS],
                actual: s.to_vec(),
            });
        }
        self.config.check_input(s[1], s[2])?;
        Ok((s[0], s[1], s[2]))
    }

    /// Shared forward. Updates running statistics of train-mode stages when
    /// `stats` is given.
    fn run(
        &self,
        x: &Tensor<F>,
        first_train: usize,
        keep_cache: bool,
        mut stats: Option<&mut Vec<(Vec<f64>, Vec<f64>)>>,
    ) -> Result<(Tensor<F>, Vec<Option<StageCache<F>>>, (usize, usize))> {
        let (n, mut h, mut w) = self.check_batch(x)?;
        if first_train < self.stages.len() && n < 2 {
            return Err(Error::BatchTooSmall(n));
        }
        let mut act: Option<Vec<F>> = None;
        let mut caches = Vec::with_capacity(self.stages.len());
        for (s, stage) in self.stages.iter().enumerate() {
            let m = n * h * w;
            let k = 9 * stage.cin;
            let cols = layers::im2col(act.as_deref().unwrap_or(x.data()), n, h, w, stage.cin);
            let mut z = layers::conv_forward(&cols, stage.weight.data(), m, k, stage.cout);
            let bn = &stage.bn;
            let train = s >= first_train;
            let (mut y, xhat, inv_std) = if train {
                let out = layers::bn_train_forward(&z, m, stage.cout, bn.scale.data(), bn.shift.data());
                if let Some(st) = stats.as_deref_mut() {
                    st.push((out.mean, out.var));
                }
                (out.y, out.xhat, out.inv_std)
            } else {
                layers::bn_eval_inplace(
                    &mut z,
                    stage.cout,
                    bn.scale.data(),
                    bn.shift.data(),
                    bn.running_mean.data(),
                    bn.running_var.data(),
                );
                (z, Vec::new(), Vec::new())
            };
            layers::relu_inplace(&mut y);
            let next = if s > 0 {
                h /= 2;
                w /= 2;
                layers::avg_pool2(&y, n, 2 * h, 2 * w, stage.cout)
            } else if keep_cache && train {
                y.clone()
            } else {
                std::mem::take(&mut y)
            };
            if keep_cache && train {
                let (h, w) = if s > 0 { (2 * h, 2 * w) } else { (h, w) };
                caches.push(Some(StageCache {
                    h,
                    w,
                    cols,
                    xhat,
                    inv_std,
                    act: y,
                }));
            } else {
                caches.push(None);
            }
            act = Some(next);
        }
        let c = self.feature_dim();
        let feats = layers::global_avg_pool(act.as_deref().unwrap_or(x.data()), n, h * w, c);
        Ok((Tensor::from_vec(&[n, c], feats)?, caches, (h, w)))
    }

    /// Eval-mode features `[n, dim]`; a pure function of parameters, running
    /// statistics and input.
    pub fn features(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        Ok(self.run(x, self.stages.len(), false, None)?.0)
    }

    /// Eval-mode features for a list of images, computed in chunks.
    pub fn features_of(&self, images: &[&Image]) -> Result<Tensor<F>> {
        const CHUNK: usize = 64;
        let dim = self.feature_dim();
        let mut data = Vec::with_capacity(images.len() * dim);
        for chunk in images.chunks(CHUNK) {
            let x = batch_tensor::<F>(chunk)?;
            data.extend_from_slice(self.features(&x)?.data());
        }
        Tensor::from_vec(&[images.len(), dim], data)
    }

    fn update_running_stats(&mut self, first_train: usize, stats: Vec<(Vec<f64>, Vec<f64>)>) {
        let mom = BN_MOMENTUM;
        for (stage, (mean, var)) in self.stages[first_train..].iter_mut().zip(stats) {
            let bn = &mut stage.bn;
            for (r, m) in bn.running_mean.data_mut().iter_mut().zip(&mean) {
                *r = F::of_f64((1.0 - mom) * r.as_f64() + mom * m);
            }
            for (r, v) in bn.running_var.data_mut().iter_mut().zip(&var) {
                *r = F::of_f64((1.0 - mom) * r.as_f64() + mom * v);
            }
        }
    }
}

impl<F: Scalar> Network<F> {
    pub fn new(extractor: FeatureExtractor<F>, head: LinearHead<F>) -> Result<Self> {
        if head.dim() != extractor.feature_dim() {
            return Err(Error::ShapeMismatch {
                expected: vec![head.n_classes(), extractor.feature_dim()],
                actual: head.weight.shape().to_vec(),
            });
        }
        Ok(Network { extractor, head })
    }

    pub fn config(&self) -> ModelConfig {
        self.extractor.config
    }

    pub fn n_classes(&self) -> usize {
        self.head.n_classes()
    }

    /// Forward pass. Train-mode stages normalise with batch statistics and
    /// fold them into the running statistics (momentum 0.1); the cache keeps
    /// what backward needs for those stages.
    pub fn forward(&mut self, x: &Tensor<F>, mode: Mode) -> Result<Forward<F>> {
        let first_train = mode.first_train_stage(self.extractor.stages.len());
        let mut stats = Vec::new();
        let (features, stages, final_hw) = self.extractor.run(x, first_train, true, Some(&mut stats))?;
        self.extractor.update_running_stats(first_train, stats);
        let logits = self.head.logits(&features);
        Ok(Forward {
            features: features.clone(),
            logits,
            cache: ForwardCache {
                n: x.shape()[0],
                first_train_stage: first_train,
                stages,
                final_hw,
                features,
            },
        })
    }

    /// Forward in eval mode without touching any state.
    pub fn logits(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let feats = self.extractor.features(x)?;
        Ok(self.head.logits(&feats))
    }

    /// Reverse-mode gradients of the loss whose logit gradient is `dlogits`.
    /// Groups with `trainable[g] == false` receive zeros; back-propagation
    /// stops below the lowest trainable stage.
    pub fn backward(
        &self,
        cache: &ForwardCache<F>,
        dlogits: &Tensor<F>,
        trainable: &[bool],
    ) -> Result<Vec<Tensor<F>>> {
        let index = super::ParamGroupIndex::new(self.config());
        if trainable.len() != index.len() {
            return Err(Error::invalid(format!(
                "trainable mask has {} entries, network has {} groups",
                trainable.len(),
                index.len()
            )));
        }
        let n = cache.n;
        let k = self.n_classes();
        let d = self.extractor.feature_dim();
        if dlogits.shape() != [n, k] {
            return Err(Error::ShapeMismatch {
                expected: vec![n, k],
                actual: dlogits.shape().to_vec(),
            });
        }
        let mut grads: Vec<Tensor<F>> = self.param_shapes().iter().map(|s| Tensor::zeros(s)).collect();
        let lowest = (0..self.extractor.stages.len())
            .find(|&s| trainable[3 * s..3 * s + 3].iter().any(|&t| t));
        if let Some(s) = lowest {
            if s < cache.first_train_stage {
                return Err(Error::invalid(format!(
                    "stage {s} is trainable but ran with eval-mode batch norm"
                )));
            }
        }

        let (dfeat, dw, db) = layers::linear_backward(
            cache.features.data(),
            self.head.weight.data(),
            dlogits.data(),
            n,
            d,
            k,
        );
        let g = index.len();
        if trainable[g - 2] {
            grads[g - 2].data_mut().copy_from_slice(&dw);
        }
        if trainable[g - 1] {
            grads[g - 1].data_mut().copy_from_slice(&db);
        }
        let Some(lowest) = lowest else {
            return Ok(grads);
        };

        let (fh, fw) = cache.final_hw;
        let mut dact = layers::global_avg_pool_backward(&dfeat, n, fh * fw, d);
        for s in (lowest..self.extractor.stages.len()).rev() {
            let stage = &self.extractor.stages[s];
            let sc = cache.stages[s]
                .as_ref()
                .ok_or_else(|| Error::invalid(format!("no cache for stage {s}")))?;
            let (h, w, c) = (sc.h, sc.w, stage.cout);
            let m = n * h * w;
            let mut dy = if s > 0 {
                layers::avg_pool2_backward(&dact, n, h, w, c)
            } else {
                dact
            };
            layers::relu_backward(&mut dy, &sc.act);
            let (dscale, dshift) =
                layers::bn_backward_inplace(&mut dy, &sc.xhat, &sc.inv_std, stage.bn.scale.data(), m, c);
            let dz = dy;
            let need_input = s > lowest;
            let (dwt, dcols) = layers::conv_backward(
                &sc.cols,
                stage.weight.data(),
                &dz,
                m,
                9 * stage.cin,
                c,
                need_input,
            );
            let base = 3 * s;
            if trainable[base] {
                grads[base].data_mut().copy_from_slice(&dwt);
            }
            if trainable[base + 1] {
                grads[base + 1].data_mut().copy_from_slice(&dscale);
            }
            if trainable[base + 2] {
                grads[base + 2].data_mut().copy_from_slice(&dshift);
            }
            dact = match dcols {
                Some(dc) => layers::col2im(&dc, n, h, w, stage.cin),
                None => break,
            };
        }
        Ok(grads)
    }

    fn param_shapes(&self) -> Vec<Vec<usize>> {
        self.params().iter().map(|t| t.shape().to_vec()).collect()
    }

    /// Trainable tensors in group order.
    pub fn params(&self) -> Vec<&Tensor<F>> {
        let mut out = Vec::new();
        for st in &self.extractor.stages {
            out.push(&st.weight);
            out.push(&st.bn.scale);
            out.push(&st.bn.shift);
        }
        out.push(&self.head.weight);
        out.push(&self.head.bias);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<F>> {
        let mut out = Vec::new();
        for st in &mut self.extractor.stages {
            out.push(&mut st.weight);
            out.push(&mut st.bn.scale);
            out.push(&mut st.bn.shift);
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }

    pub fn cast<G: Scalar>(&self) -> Network<G> {
        let stages = self
            .extractor
            .stages
            .iter()
            .map(|s| ConvBn {
                cin: s.cin,
                cout: s.cout,
                weight: s.weight.cast(),
                bn: BatchNorm {
                    scale: s.bn.scale.cast(),
                    shift: s.bn.shift.cast(),
                    running_mean: s.bn.running_mean.cast(),
                    running_var: s.bn.running_var.cast(),
                },
            })
            .collect();
        Network {
            extractor: FeatureExtractor {
                config: self.extractor.config,
                stages,
            },
            head: LinearHead {
                weight: self.head.weight.cast(),
                bias: self.head.bias.cast(),
            },
        }
    }
}
