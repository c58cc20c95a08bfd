use crate::augment::MixSample;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Soft target `weight_a · e(label_a) + (1 − weight_a) · e(label_b)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Target {
    pub label_a: usize,
    pub label_b: usize,
    pub weight_a: f64,
}

impl Target {
    pub fn hard(label: usize) -> Self {
        Target {
            label_a: label,
            label_b: label,
            weight_a: 1.0,
        }
    }

    pub fn mixed(label_a: usize, label_b: usize, weight_a: f64) -> Self {
        Target {
            label_a,
            label_b,
            weight_a,
        }
    }
}

impl From<&MixSample> for Target {
    fn from(s: &MixSample) -> Self {
        Target::mixed(s.label_a, s.label_b, s.weight_a)
    }
}

/// Mean (mixed-label) softmax cross-entropy and its gradient w.r.t. logits.
pub fn softmax_cross_entropy<F: Scalar>(
    logits: &Tensor<F>,
    targets: &[Target],
) -> Result<(f64, Tensor<F>)> {
    let (n, k) = match logits.shape() {
        [n, k] => (*n, *k),
        s => {
            return Err(Error::ShapeMismatch {
                expected: vec![targets.len(), 0],
                actual: s.to_vec(),
            })
        }
    };
    if n != targets.len() {
        return Err(Error::ShapeMismatch {
            expected: vec![targets.len(), k],
            actual: vec![n, k],
        });
    }
    for t in targets {
        for label in [t.label_a, t.label_b] {
            if label >= k {
                return Err(Error::LabelOutOfRange { label, n_classes: k });
            }
        }
    }
    let mut grad = vec![F::zero(); n * k];
    let mut total = 0.0f64;
    let inv_n = 1.0 / n as f64;
    for ((row, g), t) in logits
        .data()
        .chunks_exact(k)
        .zip(grad.chunks_exact_mut(k))
        .zip(targets)
    {
        let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v.as_f64() - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let lse = max + sum.ln();
        let wa = t.weight_a;
        let wb = 1.0 - wa;
        total += wa * (lse - row[t.label_a].as_f64()) + wb * (lse - row[t.label_b].as_f64());
        for (j, gj) in g.iter_mut().enumerate() {
            let mut v = exps[j] / sum;
            if j == t.label_a {
                v -= wa;
            }
            if j == t.label_b {
                v -= wb;
            }
            *gj = F::of_f64(v * inv_n);
        }
    }
    Ok((total * inv_n, Tensor::from_vec(&[n, k], grad)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_ln_k() {
        let logits = Tensor::<f64>::zeros(&[3, 5]);
        let (loss, _) = softmax_cross_entropy(&logits, &[Target::hard(0); 3]).unwrap();
        assert!((loss - 5f64.ln()).abs() < 1e-12);
        assert!((loss - 1.6094).abs() < 1e-4);
    }

    #[test]
    fn weight_one_equals_plain_label() {
        let logits = Tensor::from_vec(&[2, 3], vec![0.3f64, -1.0, 2.0, 0.1, 0.2, 0.3]).unwrap();
        let plain = [Target::hard(2), Target::hard(0)];
        let mixed = [Target::mixed(2, 1, 1.0), Target::mixed(0, 2, 1.0)];
        let (l1, g1) = softmax_cross_entropy(&logits, &plain).unwrap();
        let (l2, g2) = softmax_cross_entropy(&logits, &mixed).unwrap();
        assert_eq!(l1, l2);
        assert_eq!(g1, g2);
    }

    #[test]
    fn mixed_loss_is_weighted_sum() {
        let logits = Tensor::from_vec(&[1, 3], vec![0.5f64, -0.2, 1.1]).unwrap();
        let (la, _) = softmax_cross_entropy(&logits, &[Target::hard(0)]).unwrap();
        let (lb, _) = softmax_cross_entropy(&logits, &[Target::hard(2)]).unwrap();
        let (lm, _) = softmax_cross_entropy(&logits, &[Target::mixed(0, 2, 0.3)]).unwrap();
        assert!((lm - (0.3 * la + 0.7 * lb)).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let vals = vec![0.5f64, -0.2, 1.1, 0.0, 2.0, -1.0, 0.3, 0.3];
        let targets = [Target::mixed(0, 2, 0.3), Target::mixed(1, 1, 1.0)];
        let logits = Tensor::from_vec(&[2, 4], vals.clone()).unwrap();
        let (_, g) = softmax_cross_entropy(&logits, &targets).unwrap();
        let h = 1e-5;
        for i in 0..vals.len() {
            let mut up = vals.clone();
            up[i] += h;
            let mut dn = vals.clone();
            dn[i] -= h;
            let f = |v: Vec<f64>| {
                softmax_cross_entropy(&Tensor::from_vec(&[2, 4], v).unwrap(), &targets)
                    .unwrap()
                    .0
            };
            let num = (f(up) - f(dn)) / (2.0 * h);
            assert!((num - g.data()[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn label_out_of_range() {
        let logits = Tensor::<f32>::zeros(&[1, 5]);
        assert!(matches!(
            softmax_cross_entropy(&logits, &[Target::hard(5)]),
            Err(Error::LabelOutOfRange { label: 5, n_classes: 5 })
        ));
    }
}
