//! Variational and classification objectives.
//!
//! The autoencoder objective is `total = reconstruction + kl`: a Bernoulli
//! negative log-likelihood of the image under the decoder output, plus the
//! KL divergence of the diagonal Gaussian posterior from `N(0, I)`. Both
//! are averaged over the batch and summed over pixels / latent dimensions.

use crate::error::{Result, TensorError};
use crate::rng::Rng;
use crate::scalar::Real;
use crate::tape::{clamp_prob, Op, Tape, Var};
use crate::tensor::Tensor;

/// One evaluation of the autoencoder objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossTerms {
    /// Reconstruction negative log-likelihood.
    pub l1: f64,
    /// KL regularizer.
    pub l2: f64,
    pub total: f64,
}

impl LossTerms {
    pub fn new(l1: f64, l2: f64) -> Self {
        Self {
            l1,
            l2,
            total: l1 + l2,
        }
    }

    /// Weighted mean of several terms.
    pub fn weighted_mean(items: &[(LossTerms, usize)]) -> LossTerms {
        let n: usize = items.iter().map(|(_, w)| w).sum();
        if n == 0 {
            return LossTerms::default();
        }
        let (mut l1, mut l2) = (0.0, 0.0);
        for (t, w) in items {
            l1 += t.l1 * *w as f64;
            l2 += t.l2 * *w as f64;
        }
        LossTerms::new(l1 / n as f64, l2 / n as f64)
    }
}

impl<T: Real> Tape<T> {
    /// Batch mean of `-sum(x ln p + (1 - x) ln(1 - p))` with `p` clamped to
    /// `[1e-7, 1 - 1e-7]`.
    pub fn reconstruction_loss(&mut self, probs: Var, target: &Tensor<T>) -> Result<Var> {
        let ip = self.idx(probs)?;
        let p = self.node_value(ip);
        if p.shape() != target.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "reconstruction_loss",
                lhs: p.shape().to_vec(),
                rhs: target.shape().to_vec(),
            });
        }
        let batch = p.shape()[0];
        let mut total = 0.0f64;
        for (&p, &x) in p.data().iter().zip(target.data()) {
            let pc = clamp_prob(p).to_f64();
            let x = x.to_f64();
            total -= x * pc.ln() + (1.0 - x) * (1.0 - pc).ln();
        }
        let value = Tensor::scalar(T::from_f64(total / batch as f64));
        self.push(
            "reconstruction_loss",
            value,
            Op::BernoulliNll {
                probs: ip,
                target: target.data().to_vec(),
                batch,
            },
            &[ip],
        )
    }

    /// Batch mean of `-1/2 sum_d (1 + logvar - mu^2 - exp(logvar))`.
    pub fn kl_gaussian(&mut self, mu: Var, logvar: Var) -> Result<Var> {
        let (im, il) = (self.idx(mu)?, self.idx(logvar)?);
        let (m, l) = (self.node_value(im), self.node_value(il));
        if m.shape() != l.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "kl_gaussian",
                lhs: m.shape().to_vec(),
                rhs: l.shape().to_vec(),
            });
        }
        let batch = m.shape()[0];
        let mut total = 0.0f64;
        for (&m, &l) in m.data().iter().zip(l.data()) {
            let (m, l) = (m.to_f64(), l.to_f64());
            total += -0.5 * (1.0 + l - m * m - l.exp());
        }
        let value = Tensor::scalar(T::from_f64(total / batch as f64));
        self.push(
            "kl_gaussian",
            value,
            Op::KlGaussian {
                mu: im,
                logvar: il,
                batch,
            },
            &[im, il],
        )
    }

    /// Batch mean of `-ln p[true class]` over softmax rows `probs [b, k]`,
    /// with `p` floored at 1e-7.
    pub fn categorical_cross_entropy(&mut self, probs: Var, labels: &[usize]) -> Result<Var> {
        let ip = self.idx(probs)?;
        let p = self.node_value(ip);
        if p.shape().len() != 2 || p.shape()[0] != labels.len() {
            return Err(TensorError::ShapeMismatch {
                op: "categorical_cross_entropy",
                lhs: p.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        let classes = p.shape()[1];
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(TensorError::LabelOutOfRange { label, classes });
        }
        let floor = crate::tape::PROB_FLOOR;
        let total: f64 = labels
            .iter()
            .enumerate()
            .map(|(row, &l)| -p.data()[row * classes + l].to_f64().max(floor).ln())
            .sum();
        let value = Tensor::scalar(T::from_f64(total / labels.len() as f64));
        self.push(
            "categorical_cross_entropy",
            value,
            Op::CrossEntropy {
                probs: ip,
                labels: labels.to_vec(),
                classes,
            },
            &[ip],
        )
    }

    /// `z = mu + exp(logvar / 2) * eps` for a fixed noise draw `eps`.
    /// Gradient reaches `mu` and `logvar` only.
    pub fn reparameterize_with(&mut self, mu: Var, logvar: Var, eps: &Tensor<T>) -> Result<Var> {
        let (im, il) = (self.idx(mu)?, self.idx(logvar)?);
        let (m, l) = (self.node_value(im), self.node_value(il));
        if m.shape() != l.shape() || m.shape() != eps.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "reparameterize",
                lhs: m.shape().to_vec(),
                rhs: l.shape().to_vec(),
            });
        }
        let half = T::from_f64(0.5);
        let z = m
            .data()
            .iter()
            .zip(l.data())
            .zip(eps.data())
            .map(|((&m, &l), &e)| m + (l * half).exp() * e)
            .collect();
        let value = Tensor::from_parts(m.shape().to_vec(), z);
        self.push(
            "reparameterize",
            value,
            Op::Reparam {
                mu: im,
                logvar: il,
                eps: eps.data().to_vec(),
            },
            &[im, il],
        )
    }

    /// [`Self::reparameterize_with`] using standard-normal noise from `rng`.
    pub fn reparameterize(&mut self, mu: Var, logvar: Var, rng: &mut Rng) -> Result<Var> {
        let shape = self.shape(mu)?.to_vec();
        let n = shape.iter().product();
        let eps = Tensor::from_parts(shape, (0..n).map(|_| T::from_f64(rng.normal())).collect());
        self.reparameterize_with(mu, logvar, &eps)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_of(f: impl FnOnce(&mut Tape<f64>) -> Var) -> f64 {
        let mut tape = Tape::new();
        let v = f(&mut tape);
        tape.value(v).unwrap().item().unwrap()
    }

    fn t(shape: &[usize], v: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(shape, v).unwrap()
    }

    #[test]
    fn reconstruction_half_half_is_ln2() {
        let v = scalar_of(|tp| {
            let p = tp.constant(t(&[1, 1], vec![0.5]));
            tp.reconstruction_loss(p, &t(&[1, 1], vec![0.5])).unwrap()
        });
        assert!((v - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn reconstruction_perfect_limit() {
        let v = scalar_of(|tp| {
            let p = tp.constant(t(&[1, 4], vec![1.0, 0.0, 1.0 - 1e-9, 1e-9]));
            tp.reconstruction_loss(p, &t(&[1, 4], vec![1.0, 0.0, 1.0, 0.0])).unwrap()
        });
        assert!(v < 1e-6);
        let mut tp = Tape::<f64>::new();
        let p = tp.constant(t(&[1, 2], vec![0.5, 0.5]));
        assert!(tp.reconstruction_loss(p, &t(&[2, 1], vec![0.5, 0.5])).is_err());
    }

    #[test]
    fn kl_closed_forms() {
        let kl = |mu: f64, lv: f64| {
            scalar_of(|tp| {
                let m = tp.constant(t(&[1, 1], vec![mu]));
                let l = tp.constant(t(&[1, 1], vec![lv]));
                tp.kl_gaussian(m, l).unwrap()
            })
        };
        assert_eq!(kl(0.0, 0.0), 0.0);
        assert!((kl(1.0, 0.0) - 0.5).abs() < 1e-12);
        let expect = 0.5 * (2.0 - 1.0 - 2f64.ln());
        assert!((kl(0.0, 2f64.ln()) - expect).abs() < 1e-12);
        assert!((expect - 0.15343).abs() < 1e-5);
    }

    #[test]
    fn cross_entropy_examples() {
        let ce = |p: Vec<f64>, label: usize| {
            scalar_of(|tp| {
                let p = tp.constant(t(&[1, 2], p));
                tp.categorical_cross_entropy(p, &[label]).unwrap()
            })
        };
        assert!((ce(vec![0.5, 0.5], 0) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((ce(vec![0.5, 0.5], 1) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(ce(vec![1.0 - 1e-7, 1e-7], 0) < 1e-6);
        assert!((ce(vec![0.25, 0.75], 0) - 1.386_294_361).abs() < 1e-8);

        let mut tp = Tape::<f64>::new();
        let p = tp.constant(t(&[1, 2], vec![0.5, 0.5]));
        assert_eq!(
            tp.categorical_cross_entropy(p, &[2]).unwrap_err(),
            TensorError::LabelOutOfRange { label: 2, classes: 2 }
        );
    }

    #[test]
    fn reparameterize_zero_variance_limit() {
        let mut tp = Tape::<f64>::new();
        let mu = tp.constant(t(&[2, 2], vec![0.3, -1.0, 2.0, 0.0]));
        let lv = tp.constant(t(&[2, 2], vec![-30.0; 4]));
        let z = tp.reparameterize(mu, lv, &mut Rng::new(1)).unwrap();
        for (a, b) in tp.value(z).unwrap().data().iter().zip([0.3, -1.0, 2.0, 0.0]) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn reparameterize_moments_and_determinism() {
        let n = 100_000;
        let draw = |seed| {
            let mut tp = Tape::<f64>::new();
            let mu = tp.constant(Tensor::zeros(&[n, 1]).unwrap());
            let lv = tp.constant(Tensor::zeros(&[n, 1]).unwrap());
            let z = tp.reparameterize(mu, lv, &mut Rng::new(seed)).unwrap();
            tp.value(z).unwrap().data().to_vec()
        };
        let z = draw(9);
        let mean = z.iter().sum::<f64>() / n as f64;
        let var = z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.02);
        assert!((var - 1.0).abs() < 0.05);
        assert_eq!(z, draw(9));
    }

    #[test]
    fn reparameterize_grad_skips_noise() {
        let mut tp = Tape::<f64>::new();
        let mu = tp.param(t(&[1, 2], vec![0.1, 0.2]));
        let lv = tp.param(t(&[1, 2], vec![0.0, 2f64.ln() * 2.0]));
        let eps = t(&[1, 2], vec![1.0, -1.0]);
        let z = tp.reparameterize_with(mu, lv, &eps).unwrap();
        let loss = tp.sum(z).unwrap();
        let g = tp.backward(loss).unwrap();
        assert_eq!(g.get(mu).unwrap().data(), &[1.0, 1.0]);
        // d/dlv exp(lv/2) * e = 0.5 * exp(lv/2) * e
        let glv = g.get(lv).unwrap().data();
        assert!((glv[0] - 0.5).abs() < 1e-12);
        assert!((glv[1] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn loss_terms_total() {
        let t = LossTerms::new(1.25, 0.5);
        assert_eq!(t.total, 1.75);
        let m = LossTerms::weighted_mean(&[(LossTerms::new(1.0, 0.0), 1), (LossTerms::new(3.0, 2.0), 3)]);
        assert!((m.l1 - 2.5).abs() < 1e-12 && (m.l2 - 1.5).abs() < 1e-12);
    }
}
