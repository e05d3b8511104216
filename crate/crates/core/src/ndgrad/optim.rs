//! Vanilla SGD with L2 weight decay and global-norm gradient clipping.

use super::tensor::{LrGroup, Parameter};
use crate::error::arg_err;
use crate::{Error, Result};

/// Optimizer hyperparameters. Defaults follow the training setup used by
/// all models: rate 0.1, clip threshold 5, batch size 256, and a 1e-5 rate
/// for pre-trained (slow-group) layers during fine-tuning.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub base_lr: f64,
    pub slow_lr: f64,
    pub clip_norm: f64,
    pub batch_size: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            base_lr: 0.1,
            slow_lr: 0.00001,
            clip_norm: 5.0,
            batch_size: 256,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_lr <= 0.0 || self.slow_lr <= 0.0 {
            return Err(arg_err(
                "OptimizerConfig",
                format!("learning rates must be positive (base {}, slow {})", self.base_lr, self.slow_lr),
            ));
        }
        if self.clip_norm <= 0.0 {
            return Err(arg_err("OptimizerConfig", format!("clip_norm {} must be positive", self.clip_norm)));
        }
        if self.batch_size == 0 {
            return Err(arg_err("OptimizerConfig", "batch_size must be positive"));
        }
        Ok(())
    }

    fn rate(&self, group: LrGroup) -> f64 {
        match group {
            LrGroup::Fast => self.base_lr,
            LrGroup::Slow => self.slow_lr,
        }
    }
}

/// One SGD step over a parameter set.
///
/// Order of operations: L2 decay is added to each gradient first, then the
/// global L2 norm of all gradients (both rate groups jointly) is computed
/// and, if it exceeds `clip_norm`, every gradient is rescaled by
/// `clip_norm / norm`; finally each parameter moves by its group's rate.
/// Decay-before-clip means clipping bounds the full update. Gradients are
/// left in place (post-clip) so callers can inspect them; the training loop
/// zeroes them before the next backward pass.
///
/// Returns the pre-clip global gradient norm.
pub fn sgd_step(params: &mut [&mut Parameter], config: &OptimizerConfig) -> Result<f64> {
    config.validate()?;
    // decay, then global norm
    let mut sq_sum = 0.0;
    for p in params.iter_mut() {
        p.grad_checked()?;
        let wd = p.weight_decay;
        let (data, grad) = split_param(p);
        if wd > 0.0 {
            for (g, &v) in grad.iter_mut().zip(data.iter()) {
                *g += wd * v;
            }
        }
        sq_sum += grad.iter().map(|g| g * g).sum::<f64>();
    }
    let norm = sq_sum.sqrt();
    if !norm.is_finite() {
        return Err(Error::NonFinite { op: "sgd_step" });
    }
    let scale = if norm > config.clip_norm {
        config.clip_norm / norm
    } else {
        1.0
    };
    for p in params.iter_mut() {
        let lr = config.rate(p.group);
        let (data, grad) = split_param(p);
        if scale != 1.0 {
            for g in grad.iter_mut() {
                *g *= scale;
            }
        }
        for (v, &g) in data.iter_mut().zip(grad.iter()) {
            *v -= lr * g;
        }
    }
    Ok(norm)
}

/// Global L2 norm over the (current) gradients of a parameter set.
pub fn global_grad_norm(params: &[&Parameter]) -> Result<f64> {
    let mut sq = 0.0;
    for p in params {
        let g = p.grad_checked()?;
        sq += g.iter().map(|g| g * g).sum::<f64>();
    }
    Ok(sq.sqrt())
}

/// Split a parameter into simultaneous `(data, grad)` mutable views.
fn split_param(p: &mut Parameter) -> (&mut [f64], &mut [f64]) {
    // Tensor stores data and grad in separate Vecs, so this is two disjoint
    // borrows routed through one unsafe view.
    let t = &mut p.tensor;
    unsafe {
        let data_ptr = t.data_mut().as_mut_ptr();
        let data_len = t.numel();
        let grad = t.grad_mut().expect("grad checked above");
        (std::slice::from_raw_parts_mut(data_ptr, data_len), grad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndgrad::tensor::Tensor;

    fn param_with_grad(data: Vec<f64>, grad: Vec<f64>) -> Parameter {
        let n = data.len();
        let mut p = Parameter::new("p", Tensor::new(&[n], data).unwrap());
        p.tensor.grad_mut().unwrap().copy_from_slice(&grad);
        p
    }

    #[test]
    fn norm_at_threshold_is_not_scaled() {
        // gradient [3,4] has norm 5 == clip threshold: no scaling
        let mut p = param_with_grad(vec![1.0, 1.0], vec![3.0, 4.0]);
        let cfg = OptimizerConfig::default();
        let norm = sgd_step(&mut [&mut p], &cfg).unwrap();
        assert!((norm - 5.0).abs() < 1e-12);
        assert!((p.tensor.data()[0] - (1.0 - 0.1 * 3.0)).abs() < 1e-12);
        assert!((p.tensor.data()[1] - (1.0 - 0.1 * 4.0)).abs() < 1e-12);
    }

    #[test]
    fn norm_above_threshold_is_rescaled() {
        // [6,8] has norm 10 -> scaled by 5/10 to [3,4] before the update
        let mut p = param_with_grad(vec![0.0, 0.0], vec![6.0, 8.0]);
        let cfg = OptimizerConfig::default();
        sgd_step(&mut [&mut p], &cfg).unwrap();
        assert!((p.tensor.data()[0] + 0.3).abs() < 1e-12);
        assert!((p.tensor.data()[1] + 0.4).abs() < 1e-12);
        // post-clip gradients stay inspectable
        assert_eq!(p.tensor.grad().unwrap(), &[3.0, 4.0]);
    }

    #[test]
    fn fast_group_moves_ten_thousand_times_farther() {
        let mut fast = param_with_grad(vec![0.0], vec![1.0]);
        let mut slow = param_with_grad(vec![0.0], vec![1.0]);
        slow.group = LrGroup::Slow;
        let cfg = OptimizerConfig::default();
        sgd_step(&mut [&mut fast, &mut slow], &cfg).unwrap();
        let ratio = fast.tensor.data()[0] / slow.tensor.data()[0];
        assert!((ratio - 10_000.0).abs() < 1e-6, "ratio {ratio}");
    }

    #[test]
    fn weight_decay_is_added_before_clipping() {
        // param 10, wd 1 -> decay adds 10 to the zero gradient; norm 10 > 5
        // so the applied gradient is 5, and the update is -0.1*5.
        let mut p = param_with_grad(vec![10.0], vec![0.0]);
        p.weight_decay = 1.0;
        let cfg = OptimizerConfig::default();
        let norm = sgd_step(&mut [&mut p], &cfg).unwrap();
        assert!((norm - 10.0).abs() < 1e-12);
        assert!((p.tensor.data()[0] - (10.0 - 0.5)).abs() < 1e-12);
    }

    #[test]
    fn missing_gradient_is_a_state_error() {
        let mut p = Parameter::new("q", Tensor::zeros(&[2]));
        p.tensor.clear_grad();
        let cfg = OptimizerConfig::default();
        assert!(matches!(
            sgd_step(&mut [&mut p], &cfg),
            Err(Error::State { .. })
        ));
    }
}
