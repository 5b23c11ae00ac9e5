//! AdamW with decoupled weight decay, plus the milestone LR schedule.

use super::params::ParamSet;
use super::{Scalar, Tensor};

#[derive(Debug, Clone)]
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
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

/// One AdamW update on a single tensor. `step` is 1-based.
pub fn adamw_step<T: Scalar>(
    param: &mut Tensor<T>,
    grad: &Tensor<T>,
    m: &mut Tensor<T>,
    v: &mut Tensor<T>,
    step: u64,
    cfg: &AdamWConfig,
) {
    debug_assert_eq!(param.shape(), grad.shape());
    let b1 = T::from_f64(cfg.beta1);
    let b2 = T::from_f64(cfg.beta2);
    let one = T::one();
    let lr = T::from_f64(cfg.lr);
    let eps = T::from_f64(cfg.eps);
    let wd = T::from_f64(cfg.weight_decay);
    let c1 = T::from_f64(1.0 - cfg.beta1.powi(step as i32));
    let c2 = T::from_f64(1.0 - cfg.beta2.powi(step as i32));
    let (pd, gd) = (param.data_mut(), grad.data());
    let (md, vd) = (m.data_mut(), v.data_mut());
    for i in 0..pd.len() {
        md[i] = b1 * md[i] + (one - b1) * gd[i];
        vd[i] = b2 * vd[i] + (one - b2) * gd[i] * gd[i];
        let m_hat = md[i] / c1;
        let v_hat = vd[i] / c2;
        pd[i] = pd[i] - lr * (m_hat / (v_hat.sqrt() + eps) + wd * pd[i]);
    }
}

/// AdamW over a whole [`ParamSet`]; moment buffers are kept per parameter.
pub struct Optimizer<T: Scalar> {
    cfg: AdamWConfig,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    step: u64,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(cfg: AdamWConfig, params: &ParamSet<T>) -> Self {
        let m = params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        let v = params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self {
            cfg,
            m,
            v,
            step: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.cfg.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    /// Apply one update. Parameters whose grad slot is `None` are skipped.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &[Option<Tensor<T>>]) {
        assert_eq!(grads.len(), params.len(), "grads must align with params");
        self.step += 1;
        for (idx, id) in params.ids().collect::<Vec<_>>().into_iter().enumerate() {
            if let Some(g) = &grads[idx] {
                adamw_step(
                    params.value_mut(id),
                    g,
                    &mut self.m[idx],
                    &mut self.v[idx],
                    self.step,
                    &self.cfg,
                );
            }
        }
    }
}

/// Learning-rate schedule that multiplies by `factor` at each milestone
/// epoch (milestones are 1-based, matching "at the Nth epoch").
#[derive(Debug, Clone)]
pub struct MultiStepLr {
    pub base_lr: f64,
    pub milestones: Vec<usize>,
    pub factor: f64,
}

impl MultiStepLr {
    pub fn new(base_lr: f64, milestones: Vec<usize>, factor: f64) -> Self {
        Self {
            base_lr,
            milestones,
            factor,
        }
    }

    pub fn lr_for_epoch(&self, epoch: usize) -> f64 {
        let hits = self.milestones.iter().filter(|&&m| m <= epoch).count();
        self.base_lr * self.factor.powi(hits as i32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_lr_step_is_bit_identical() {
        let mut p: Tensor<f32> =
            Tensor::from_vec(vec![0.5, -1.25, 3.0, 0.0], &[4]).unwrap();
        let before = p.clone();
        let g = Tensor::from_vec(vec![1.0, -2.0, 0.5, 4.0], &[4]).unwrap();
        let mut m = Tensor::zeros(&[4]);
        let mut v = Tensor::zeros(&[4]);
        let cfg = AdamWConfig {
            lr: 0.0,
            ..AdamWConfig::default()
        };
        adamw_step(&mut p, &g, &mut m, &mut v, 1, &cfg);
        assert_eq!(
            p.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            before.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn adamw_moves_against_gradient() {
        let mut p: Tensor<f64> = Tensor::from_vec(vec![1.0], &[1]).unwrap();
        let g = Tensor::from_vec(vec![10.0], &[1]).unwrap();
        let mut m = Tensor::zeros(&[1]);
        let mut v = Tensor::zeros(&[1]);
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        adamw_step(&mut p, &g, &mut m, &mut v, 1, &cfg);
        assert!(p.data()[0] < 1.0);
        // first step is approximately -lr regardless of grad scale
        assert!((p.data()[0] - 0.9).abs() < 1e-6);
    }

    #[test]
    fn multistep_halves_at_milestones() {
        let s = MultiStepLr::new(2e-4, vec![10, 20, 30], 0.5);
        assert_eq!(s.lr_for_epoch(1), 2e-4);
        assert_eq!(s.lr_for_epoch(9), 2e-4);
        assert_eq!(s.lr_for_epoch(10), 1e-4);
        assert_eq!(s.lr_for_epoch(19), 1e-4);
        assert_eq!(s.lr_for_epoch(20), 5e-5);
        assert_eq!(s.lr_for_epoch(30), 2.5e-5);
        assert_eq!(s.lr_for_epoch(50), 2.5e-5);
    }
}
