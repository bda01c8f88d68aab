//! SGD with momentum, L2 weight decay and a polynomial learning-rate decay.

use serde::{Deserialize, Serialize};

use crate::error::{shape, Result};
use crate::model::Network;

/// `base_lr * (1 - t / t_max)^power`, zero from `t_max` on.
pub fn poly_lr(base_lr: f64, t: u64, t_max: u64, power: f64) -> f64 {
    if t >= t_max {
        return 0.0;
    }
    base_lr * (1.0 - t as f64 / t_max as f64).powf(power)
}

/// Scales `grad` so its global L2 norm is at most `max_norm`. Returns the norm before scaling.
pub fn clip_grad_norm(grad: &mut Network, max_norm: f64) -> f64 {
    let norm = grad
        .param_slices()
        .flatten()
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        grad.param_slices_mut()
            .for_each(|b| b.iter_mut().for_each(|g| *g *= scale));
    }
    norm
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    /// Flat velocity buffer in the network's canonical parameter order.
    pub velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(net: &Network, momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: vec![0.0; net.num_params()],
        }
    }

    /// `v = momentum * v + (g + wd * w)`, `w -= lr * v`.
    pub fn step(&mut self, net: &mut Network, grad: &Network, lr: f64) -> Result<()> {
        if self.velocity.len() != net.num_params() {
            return shape("optimizer state does not match the network");
        }
        let mut off = 0;
        for (param, g) in net.param_slices_mut().zip(grad.param_slices()) {
            let vel = &mut self.velocity[off..off + param.len()];
            for ((w, &gv), v) in param.iter_mut().zip(g).zip(vel.iter_mut()) {
                *v = self.momentum * *v + gv + self.weight_decay * *w;
                *w -= lr * *v;
            }
            off += param.len();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::NetConfig;

    #[test]
    fn poly_schedule() {
        assert_eq!(poly_lr(0.05, 0, 100, 0.9), 0.05);
        let expect = 0.05 * 0.5f64.powf(0.9);
        assert!((poly_lr(0.05, 50, 100, 0.9) - expect).abs() <= 1e-12 * expect);
        assert_eq!(poly_lr(0.05, 100, 100, 0.9), 0.0);
    }

    #[test]
    fn clipping_caps_the_global_norm() {
        let cfg = NetConfig {
            num_classes: 2,
            widths: vec![1, 1, 1],
            fused_dim: 1,
        };
        let mut grad = Network::zeros(cfg).zeros_like();
        grad.param_slices_mut().for_each(|b| b.fill(2.0));
        let n = grad.num_params() as f64;
        let before = clip_grad_norm(&mut grad, 1.0);
        assert!((before - 2.0 * n.sqrt()).abs() < 1e-12);
        let after = grad
            .param_slices()
            .flatten()
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt();
        assert!((after - 1.0).abs() < 1e-12);
        assert!((clip_grad_norm(&mut grad, 5.0) - 1.0).abs() < 1e-12);
        assert!((grad.param_slices().flatten().next().unwrap() - 1.0 / n.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn momentum_step() {
        let cfg = NetConfig {
            num_classes: 2,
            widths: vec![1, 1, 1],
            fused_dim: 1,
        };
        let mut net = Network::zeros(cfg);
        let mut grad = net.zeros_like();
        grad.param_slices_mut().for_each(|b| b.fill(1.0));
        let mut opt = Sgd::new(&net, 0.9, 0.0);
        opt.step(&mut net, &grad, 0.1).unwrap();
        assert!(net
            .param_slices()
            .flatten()
            .all(|&v| (v + 0.1).abs() < 1e-15));
        opt.step(&mut net, &grad, 0.1).unwrap();
        assert!(net
            .param_slices()
            .flatten()
            .all(|&v| (v + 0.29).abs() < 1e-12));
    }
}
