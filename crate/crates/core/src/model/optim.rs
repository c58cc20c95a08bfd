use super::net::Network;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// SGD with momentum and L2 weight decay folded into the gradient:
///
/// ```text
/// g' = g + wd·p
/// buf = momentum·buf + g'
/// p  -= lr·buf
/// ```
#[derive(Clone, Debug)]
pub struct OptState<F: Scalar = f32> {
    pub hp: SgdConfig,
    buffers: Vec<Tensor<F>>,
}

/// One update of a flat parameter slice.
pub fn sgd_update<F: Scalar>(p: &mut [F], g: &[F], buf: &mut [F], hp: &SgdConfig) {
    let lr = F::of_f64(hp.lr);
    let mom = F::of_f64(hp.momentum);
    let wd = F::of_f64(hp.weight_decay);
    for ((pi, &gi), bi) in p.iter_mut().zip(g).zip(buf.iter_mut()) {
        let g2 = gi + wd * *pi;
        *bi = mom * *bi + g2;
        *pi = *pi - lr * *bi;
    }
}

impl<F: Scalar> OptState<F> {
    /// Zero momentum buffers shaped like `net`'s parameters.
    pub fn new(net: &Network<F>, hp: SgdConfig) -> Self {
        OptState {
            hp,
            buffers: net.params().iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    pub fn buffers(&self) -> &[Tensor<F>] {
        &self.buffers
    }

    /// Updates the groups with `trainable[g] == true`; all other groups and
    /// their buffers are left untouched.
    pub fn step(&mut self, net: &mut Network<F>, grads: &[Tensor<F>], trainable: &[bool]) -> Result<()> {
        let mut params = net.params_mut();
        if grads.len() != params.len() || trainable.len() != params.len() {
            return Err(Error::invalid("gradient / mask count does not match parameter groups"));
        }
        for (g, p) in params.iter_mut().enumerate() {
            if !trainable[g] {
                continue;
            }
            if p.shape() != grads[g].shape() || p.shape() != self.buffers[g].shape() {
                return Err(Error::ShapeMismatch {
                    expected: p.shape().to_vec(),
                    actual: grads[g].shape().to_vec(),
                });
            }
            sgd_update(p.data_mut(), grads[g].data(), self.buffers[g].data_mut(), &self.hp);
        }
        Ok(())
    }
}
