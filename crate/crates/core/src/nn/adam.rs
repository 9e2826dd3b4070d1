use super::network::{Network, ParamRole};

/// Optimizer hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 coefficient added to weight gradients (never to biases or norms).
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-6,
        }
    }
}

/// Moment accumulators for one parameter array.
#[derive(Debug, Clone, Default)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Bias-corrected Adam update of `params` in place, `step` counting from 1.
pub fn adam_step(params: &mut [f64], grads: &[f64], moments: &mut Moments, step: u64, decay: f64, cfg: &AdamConfig) {
    assert_eq!(params.len(), grads.len());
    assert!(step >= 1);
    if moments.m.len() != params.len() {
        moments.m = vec![0.0; params.len()];
        moments.v = vec![0.0; params.len()];
    }
    let bc1 = 1.0 - cfg.beta1.powi(step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(step as i32);
    for i in 0..params.len() {
        let g = grads[i] + decay * params[i];
        let m = cfg.beta1 * moments.m[i] + (1.0 - cfg.beta1) * g;
        let v = cfg.beta2 * moments.v[i] + (1.0 - cfg.beta2) * g * g;
        moments.m[i] = m;
        moments.v[i] = v;
        params[i] -= cfg.lr * (m / bc1) / ((v / bc2).sqrt() + cfg.eps);
    }
}

/// Adam state for a whole network: one [`Moments`] per parameter array.
#[derive(Debug, Clone, Default)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub moments: Vec<Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: Vec::new(),
        }
    }

    /// Applies one update using the gradients stored by the last backward pass.
    pub fn update(&mut self, net: &mut Network) {
        self.step += 1;
        let step = self.step;
        let cfg = self.config;
        let moments = &mut self.moments;
        let mut i = 0;
        net.for_each_param(|role, p, g| {
            if moments.len() <= i {
                moments.push(Moments::default());
            }
            let decay = if role == ParamRole::Weight {
                cfg.weight_decay
            } else {
                0.0
            };
            adam_step(p, g, &mut moments[i], step, decay, &cfg);
            i += 1;
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![0.5, -1.0];
        let mut m = Moments::default();
        adam_step(&mut p, &[0.0, 0.0], &mut m, 1, 0.0, &AdamConfig::default());
        assert_eq!(p, vec![0.5, -1.0]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let cfg = AdamConfig::default();
        for g in [1e-3, 0.7, -42.0] {
            let mut p = vec![1.0];
            let mut m = Moments::default();
            adam_step(&mut p, &[g], &mut m, 1, 0.0, &cfg);
            // m̂ = g, v̂ = g², so the step is lr·|g|/(|g|+eps).
            let expected = cfg.lr * g.abs() / (g.abs() + cfg.eps);
            assert!(((1.0 - p[0]).abs() - expected).abs() < 1e-15);
            assert!(((1.0 - p[0]).abs() - cfg.lr).abs() < 1e-7);
        }
    }

    #[test]
    fn decay_adds_to_gradient() {
        let cfg = AdamConfig::default();
        let mut a = vec![2.0];
        let mut b = vec![2.0];
        adam_step(&mut a, &[0.0], &mut Moments::default(), 1, 0.5, &cfg);
        adam_step(&mut b, &[1.0], &mut Moments::default(), 1, 0.0, &cfg);
        assert_eq!(a, b);
    }
}
