//! Plain SGD with step learning-rate decay.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct SgdConfig {
    pub learning_rate: f64,
    /// Multiplier applied every `step_epochs` epochs, in `(0, 1]`.
    pub gamma: f64,
    pub step_epochs: usize,
    pub batch_size: usize,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            learning_rate: 0.1,
            gamma: 0.8,
            step_epochs: 1,
            batch_size: 256,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Spec(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Spec(format!("gamma must be in (0, 1], got {}", self.gamma)));
        }
        if self.step_epochs == 0 || self.batch_size == 0 {
            return Err(Error::Spec("step_epochs and batch_size must be positive".into()));
        }
        Ok(())
    }

    /// `learning_rate · gamma^⌊epoch / step_epochs⌋`.
    pub fn effective_lr(&self, epoch: usize) -> f64 {
        let decays = (epoch / self.step_epochs) as i32;
        self.learning_rate * self.gamma.powi(decays)
    }
}

/// Applies `w ← w − lr·grad(w)` to every parameter, then zeroes the gradients.
///
/// All gradients are checked before any parameter is touched, so a missing
/// gradient leaves every parameter unchanged.
pub fn sgd_step(params: &mut [(&str, &mut Tensor)], config: &SgdConfig, epoch: usize) -> Result<()> {
    if let Some((name, _)) = params.iter().find(|(_, t)| t.grad().is_none()) {
        return Err(Error::MissingGrad((*name).to_string()));
    }
    let lr = config.effective_lr(epoch);
    for (_, t) in params.iter_mut() {
        let grad = t.grad().expect("checked above").to_vec();
        t.data_mut()
            .iter_mut()
            .zip(&grad)
            .for_each(|(w, g)| *w -= lr * g);
        t.zero_grad();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_step() {
        let mut w = Tensor::scalar(1.0).with_grad();
        w.accumulate_grad(&[0.5]).unwrap();
        sgd_step(&mut [("w", &mut w)], &SgdConfig::default(), 0).unwrap();
        assert!((w.data()[0] - 0.95).abs() < 1e-15);
        assert_eq!(w.grad().unwrap(), &[0.0]);
    }

    #[test]
    fn step_decay() {
        let cfg = SgdConfig::default();
        assert_eq!(cfg.effective_lr(0), 0.1);
        assert!((cfg.effective_lr(2) - 0.064).abs() < 1e-15);
        let every_two = SgdConfig {
            step_epochs: 2,
            ..SgdConfig::default()
        };
        assert_eq!(every_two.effective_lr(1), 0.1);
    }

    #[test]
    fn zero_gradient_is_identity() {
        let mut w = Tensor::vector(vec![0.25, -3.0, 0.0]).with_grad();
        w.accumulate_grad(&[0.0, 0.0, 0.0]).unwrap();
        let before = w.data().to_vec();
        sgd_step(&mut [("w", &mut w)], &SgdConfig::default(), 5).unwrap();
        assert_eq!(w.data(), before.as_slice());
    }

    #[test]
    fn missing_grad_names_parameter() {
        let mut a = Tensor::scalar(1.0).with_grad();
        a.accumulate_grad(&[1.0]).unwrap();
        let mut b = Tensor::scalar(2.0).with_grad();
        let err = sgd_step(&mut [("a", &mut a), ("classifier.bias", &mut b)], &SgdConfig::default(), 0)
            .unwrap_err();
        assert!(err.to_string().contains("classifier.bias"));
        assert_eq!(a.data(), &[1.0]);
    }

    #[test]
    fn invalid_configs_rejected() {
        let bad = SgdConfig {
            gamma: 1.5,
            ..SgdConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(SgdConfig::default().validate().is_ok());
    }
}
