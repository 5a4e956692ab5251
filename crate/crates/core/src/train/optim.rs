use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Module, ParamKind};
use crate::tensor::{Gradients, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// First epoch trained at a tenth of `lr`.
    pub decay_epoch: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decay_epoch: 30,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.lr, self.weight_decay, self.beta1, self.beta2, self.eps];
        if finite.iter().any(|v| !v.is_finite() || *v < 0.0)
            || self.lr == 0.0
            || self.eps == 0.0
            || self.beta1 >= 1.0
            || self.beta2 >= 1.0
        {
            return Err(Error::Config(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }

    /// Step schedule: `lr` before `decay_epoch`, `lr / 10` from then on.
    pub fn lr_schedule(&self, epoch: usize) -> f64 {
        if epoch < self.decay_epoch {
            self.lr
        } else {
            self.lr / 10.0
        }
    }
}

/// AdamW moments, one buffer pair per trainable tensor in visiting order.
#[derive(Debug, Clone)]
pub struct OptimState {
    pub cfg: OptimConfig,
    pub lr: f64,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl OptimState {
    pub fn new(cfg: OptimConfig) -> Self {
        Self {
            cfg,
            lr: cfg.lr,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// One update of `params` in place. Missing gradients count as zero, so
    /// decoupled decay still applies.
    pub fn update(&mut self, params: &mut [&mut [f64]], grads: &[Option<&[f64]>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Contract(format!("{} params but {} gradients", params.len(), grads.len())));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(Error::Contract("parameter set changed between optimizer steps".into()));
        }
        self.step += 1;
        let OptimConfig { weight_decay: wd, beta1: b1, beta2: b2, eps, .. } = self.cfg;
        let t = self.step as i32;
        let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
        for (i, p) in params.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            if m.len() != p.len() || grads[i].is_some_and(|g| g.len() != p.len()) {
                return Err(Error::shape("adamw_step", &[p.len()], &[m.len()]));
            }
            for j in 0..p.len() {
                let g = grads[i].map_or(0.0, |g| g[j]);
                m[j] = b1 * m[j] + (1.0 - b1) * g;
                v[j] = b2 * v[j] + (1.0 - b2) * g * g;
                let (mh, vh) = (m[j] / c1, v[j] / c2);
                p[j] -= self.lr * (mh / (vh.sqrt() + eps) + wd * p[j]);
            }
        }
        Ok(())
    }
}

/// Apply one AdamW step to every trainable tensor of `model`.
pub fn adamw_step<M: Module + ?Sized>(model: &mut M, grads: &Gradients, state: &mut OptimState) -> Result<()> {
    let mut values = Vec::new();
    let mut gs = Vec::new();
    model.visit("", &mut |_, t, k| {
        if k == ParamKind::Trainable {
            values.push(t.to_vec());
            gs.push(grads.get(t).map(Tensor::data));
        }
    });
    let mut slices: Vec<&mut [f64]> = values.iter_mut().map(|v| v.as_mut_slice()).collect();
    state.update(&mut slices, &gs)?;
    let mut values = values.into_iter();
    let mut result = Ok(());
    model.visit_mut("", &mut |_, t, k| {
        if k == ParamKind::Trainable && result.is_ok() {
            result = t.set_data(values.next().expect("same visiting order"));
        }
    });
    result
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule() {
        let c = OptimConfig::default();
        assert_eq!(c.lr_schedule(0), 0.0005);
        assert_eq!(c.lr_schedule(29), 0.0005);
        assert_eq!(c.lr_schedule(30), 0.00005);
        assert_eq!(c.lr_schedule(59), 0.00005);
    }

    #[test]
    fn zero_gradient_applies_decay_only() {
        let mut s = OptimState::new(OptimConfig::default());
        let mut p = vec![2.0, -3.0];
        s.update(&mut [&mut p[..]], &[Some(&[0.0, 0.0][..])]).unwrap();
        assert_eq!(p, vec![2.0 * (1.0 - 5e-8), -3.0 * (1.0 - 5e-8)]);
    }

    #[test]
    fn first_step_moves_by_lr_against_the_sign() {
        let cfg = OptimConfig { weight_decay: 0.0, ..Default::default() };
        let mut s = OptimState::new(cfg);
        let mut p = vec![1.0, 1.0];
        s.update(&mut [&mut p[..]], &[Some(&[0.3, -2.0][..])]).unwrap();
        assert!((p[0] - (1.0 - 5e-4)).abs() < 1e-10);
        assert!((p[1] - (1.0 + 5e-4)).abs() < 1e-10);
    }

    /// Textbook scalar Adam with decoupled decay.
    fn scalar_adamw(theta: &mut f64, gs: &[f64], c: &OptimConfig) {
        let (mut m, mut v) = (0.0f64, 0.0f64);
        for (t, &g) in gs.iter().enumerate() {
            let t = (t + 1) as i32;
            m = c.beta1 * m + (1.0 - c.beta1) * g;
            v = c.beta2 * v + (1.0 - c.beta2) * g * g;
            let mh = m / (1.0 - c.beta1.powi(t));
            let vh = v / (1.0 - c.beta2.powi(t));
            *theta = *theta - c.lr * (mh / (vh.sqrt() + c.eps) + c.weight_decay * *theta);
        }
    }

    #[test]
    fn matches_scalar_reference_over_three_steps() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for wd in [0.0, 1e-4] {
            let c = OptimConfig { weight_decay: wd, ..Default::default() };
            let init: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
            let grads: Vec<Vec<f64>> = (0..3).map(|_| (0..6).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let mut s = OptimState::new(c);
            let mut p = init.clone();
            for g in &grads {
                s.update(&mut [&mut p[..]], &[Some(&g[..])]).unwrap();
            }
            for j in 0..6 {
                let mut theta = init[j];
                let gs: Vec<f64> = grads.iter().map(|g| g[j]).collect();
                scalar_adamw(&mut theta, &gs, &c);
                assert!((theta - p[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_inconsistent_shapes() {
        let mut s = OptimState::new(OptimConfig::default());
        let mut p = vec![0.0; 3];
        assert!(s.update(&mut [&mut p[..]], &[Some(&[0.0][..])]).is_err());
        assert!(OptimConfig { lr: 0.0, ..Default::default() }.validate().is_err());
    }
}
