use super::Tensor;
use crate::error::{Error, Result};

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
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    config: AdamWConfig,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    steps: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &[Tensor]) -> Self {
        Self {
            config,
            first: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            second: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(Error::dim(
                "adamw",
                format!("{} params, {} grads, {} slots", params.len(), grads.len(), self.first.len()),
            ));
        }
        self.steps += 1;
        let c = self.config;
        let bias1 = 1.0 - c.beta1.powi(self.steps as i32);
        let bias2 = 1.0 - c.beta2.powi(self.steps as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::dim("adamw", format!("param {i}: {:?} vs {:?}", p.shape(), g.shape())));
            }
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (k, (w, gk)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * gk;
                v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * gk * gk;
                let mhat = m[k] / bias1;
                let vhat = v[k] / bias2;
                *w -= c.lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * *w);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut params = vec![Tensor::new([2], vec![1.0, -1.0]).unwrap()];
        let grads = vec![Tensor::new([2], vec![0.3, -5.0]).unwrap()];
        let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        let mut opt = AdamW::new(cfg, &params);
        opt.step(&mut params, &grads).unwrap();
        let d = params[0].data();
        assert!((d[0] - (1.0 - 1e-4)).abs() < 1e-9);
        assert!((d[1] - (-1.0 + 1e-4)).abs() < 1e-9);
    }

    #[test]
    fn decay_is_decoupled_from_gradient() {
        let mut params = vec![Tensor::new([1], vec![2.0]).unwrap()];
        let grads = vec![Tensor::zeros([1])];
        let cfg = AdamWConfig { lr: 0.1, weight_decay: 0.5, ..Default::default() };
        let mut opt = AdamW::new(cfg, &params);
        opt.step(&mut params, &grads).unwrap();
        assert!((params[0].data()[0] - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-12);
    }
}
