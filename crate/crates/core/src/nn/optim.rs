use serde::{Deserialize, Serialize};

use super::layers::Param;
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// SGD with momentum and a step learning-rate schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// The rate is multiplied by `decay_factor` every `decay_every` epochs.
    pub decay_every: usize,
    pub decay_factor: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            momentum: 0.9,
            epochs: 20,
            batch_size: 8,
            decay_every: 10,
            decay_factor: 0.1,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::ConfigInvalid(msg));
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad(format!("learning rate {} must be >= 0", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} must be in [0, 1)", self.momentum));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.decay_every == 0 {
            return bad("epochs, batch size and decay interval must be >= 1".into());
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return bad(format!("decay factor {} must be in (0, 1]", self.decay_factor));
        }
        Ok(())
    }

    /// Learning rate for a 0-based epoch.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        self.learning_rate * self.decay_factor.powi((epoch / self.decay_every) as i32)
    }
}

/// Momentum buffers, matched to parameters by position.
#[derive(Debug, Clone, Default)]
pub struct Sgd<T> {
    velocity: Vec<Tensor<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new() -> Self {
        Self {
            velocity: Vec::new(),
        }
    }

    /// `v <- momentum * v + grad; value <- value - lr(epoch) * v`
    pub fn step(&mut self, params: Vec<&mut Param<T>>, config: &SgdConfig, epoch: usize) -> Result<()> {
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        }
        if self.velocity.len() != params.len() {
            return Err(Error::ShapeMismatch(format!(
                "optimizer tracks {} parameters, got {}",
                self.velocity.len(),
                params.len()
            )));
        }
        let lr = T::from_f64(config.learning_rate_at(epoch));
        let mu = T::from_f64(config.momentum);
        for (param, v) in params.into_iter().zip(&mut self.velocity) {
            if v.shape() != param.value.shape() || param.grad.shape() != param.value.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "parameter {:?} / gradient {:?} / velocity {:?}",
                    param.value.shape(),
                    param.grad.shape(),
                    v.shape()
                )));
            }
            let Param { value, grad } = param;
            for ((w, &g), vel) in value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(v.data_mut())
            {
                *vel = mu * *vel + g;
                *w = *w - lr * *vel;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(values: &[f64], grads: &[f64]) -> Param<f64> {
        let mut p = Param::new(Tensor::new(vec![values.len()], values.to_vec()).unwrap());
        p.grad.data_mut().copy_from_slice(grads);
        p
    }

    #[test]
    fn schedule() {
        let cfg = SgdConfig::default();
        assert_eq!(cfg.learning_rate_at(0), 0.01);
        assert_eq!(cfg.learning_rate_at(9), 0.01);
        assert!((cfg.learning_rate_at(10) - 0.001).abs() < 1e-18);
        assert!((cfg.learning_rate_at(19) - 0.001).abs() < 1e-18);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = param(&[1.0, -2.0], &[0.0, 0.0]);
        let mut sgd = Sgd::new();
        sgd.step(vec![&mut p], &SgdConfig::default(), 0).unwrap();
        assert_eq!(p.value.data(), &[1.0, -2.0]);
    }

    #[test]
    fn plain_step() {
        let mut p = param(&[1.0], &[1.0]);
        let cfg = SgdConfig {
            momentum: 0.0,
            ..SgdConfig::default()
        };
        Sgd::new().step(vec![&mut p], &cfg, 0).unwrap();
        assert!((p.value.data()[0] - 0.99).abs() < 1e-15);
    }

    #[test]
    fn momentum_accumulates() {
        let mut p = param(&[0.0], &[1.0]);
        let cfg = SgdConfig {
            learning_rate: 1.0,
            momentum: 0.5,
            ..SgdConfig::default()
        };
        let mut sgd = Sgd::new();
        sgd.step(vec![&mut p], &cfg, 0).unwrap();
        sgd.step(vec![&mut p], &cfg, 0).unwrap();
        // v1 = 1, v2 = 1.5
        assert_eq!(p.value.data(), &[-2.5]);
    }

    #[test]
    fn validation() {
        assert!(SgdConfig::default().validate().is_ok());
        let zero_lr = SgdConfig {
            learning_rate: 0.0,
            ..SgdConfig::default()
        };
        assert!(zero_lr.validate().is_ok());
        for bad in [
            SgdConfig {
                learning_rate: -1.0,
                ..SgdConfig::default()
            },
            SgdConfig {
                momentum: 1.0,
                ..SgdConfig::default()
            },
            SgdConfig {
                batch_size: 0,
                ..SgdConfig::default()
            },
        ] {
            assert!(matches!(bad.validate(), Err(Error::ConfigInvalid(_))));
        }
    }

    #[test]
    fn mismatched_parameter_count() {
        let mut a = param(&[1.0], &[1.0]);
        let mut b = param(&[1.0], &[1.0]);
        let mut sgd = Sgd::new();
        sgd.step(vec![&mut a], &SgdConfig::default(), 0).unwrap();
        assert!(sgd.step(vec![&mut a, &mut b], &SgdConfig::default(), 0).is_err());
    }
}
