//! AdamW with decoupled weight decay.

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First and second moment estimates for one parameter tensor.
#[derive(Clone, Debug, Default)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Moments {
    pub fn zeros(n: usize) -> Self {
        Moments {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

/// One AdamW update of `params` in place. `step` is 1-based.
///
/// The decay `p -= lr * wd * p` is applied on its own, before and
/// independently of the adaptive step.
pub fn adamw_step(params: &mut [f64], grads: &[f64], state: &mut Moments, step: u64, cfg: &AdamWConfig) {
    assert_eq!(params.len(), grads.len());
    assert_eq!(state.m.len(), params.len());
    let bc1 = 1.0 - cfg.beta1.powi(step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(step as i32);
    for i in 0..params.len() {
        let g = grads[i];
        if cfg.weight_decay != 0.0 {
            params[i] -= cfg.lr * cfg.weight_decay * params[i];
        }
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

/// Optimizer over a fixed list of trainable tensors. State is allocated only
/// for tensors with `requires_grad`.
#[derive(Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    slots: Vec<Option<Moments>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &[&Tensor]) -> Self {
        let slots = params
            .iter()
            .map(|p| p.requires_grad().then(|| Moments::zeros(p.len())))
            .collect();
        AdamW { config, step: 0, slots }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Number of tensors with allocated moment buffers.
    pub fn state_count(&self) -> usize {
        self.slots.iter().filter(|s| s.is_some()).count()
    }

    /// Applies one update using each tensor's accumulated gradient (scaled by
    /// `grad_scale`), then clears the gradients. Tensors without a gradient
    /// are treated as having a zero gradient.
    pub fn step(&mut self, params: &mut [&mut Tensor], grad_scale: f64) {
        assert_eq!(params.len(), self.slots.len(), "parameter list changed");
        self.step += 1;
        for (p, slot) in params.iter_mut().zip(&mut self.slots) {
            let Some(state) = slot.as_mut() else {
                continue;
            };
            let grad = p.take_grad();
            let g: Vec<f64> = match &grad {
                Some(g) => g.iter().map(|x| x * grad_scale).collect(),
                None => vec![0.0; p.len()],
            };
            adamw_step(p.values_mut(), &g, state, self.step, &self.config);
            p.restore_grad(grad);
            p.zero_grad();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_is_lr_sized() {
        let cfg = AdamWConfig {
            lr: 0.1,
            ..Default::default()
        };
        let mut p = [0.0];
        let mut s = Moments::zeros(1);
        adamw_step(&mut p, &[1.0], &mut s, 1, &cfg);
        assert!((p[0] + 0.1 * (1.0 / (1.0 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn decay_is_decoupled() {
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..Default::default()
        };
        let mut p = [2.0];
        let mut s = Moments::zeros(1);
        adamw_step(&mut p, &[0.0], &mut s, 1, &cfg);
        assert_eq!(p[0], 2.0 - 0.1 * 0.5 * 2.0);
    }

    #[test]
    fn quadratic_converges() {
        // Scalar simulation of (p - 3)^2 from p = 0.
        let cfg = AdamWConfig {
            lr: 0.1,
            ..Default::default()
        };
        let mut p = [0.0];
        let mut s = Moments::zeros(1);
        for step in 1..=100 {
            let g = 2.0 * (p[0] - 3.0);
            adamw_step(&mut p, &[g], &mut s, step, &cfg);
        }
        assert!((p[0] - 3.0).abs() < 0.05, "{}", p[0]);
    }

    #[test]
    fn no_state_for_frozen_tensors() {
        let mut frozen = Tensor::filled(&[3], 1.0);
        let mut live = Tensor::filled(&[2], 1.0).trainable();
        let mut opt = AdamW::new(AdamWConfig::default(), &[&frozen, &live]);
        assert_eq!(opt.state_count(), 1);
        live.accumulate_grad(&[1.0, -1.0]);
        opt.step(&mut [&mut frozen, &mut live], 1.0);
        assert_eq!(frozen.values(), &[1.0; 3]);
        assert!(live.values()[0] < 1.0 && live.values()[1] > 1.0);
        assert_eq!(live.grad().unwrap(), &[0.0, 0.0]);
    }
}
