//! AdamW with decoupled weight decay and a cosine learning-rate schedule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
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
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Per-parameter first and second moments plus the shared step counter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState<T> {
    pub step: u64,
    pub first: BTreeMap<String, Vec<T>>,
    pub second: BTreeMap<String, Vec<T>>,
}

#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    pub state: OptimizerState<T>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            state: OptimizerState {
                step: 0,
                first: BTreeMap::new(),
                second: BTreeMap::new(),
            },
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// One update of every parameter that carries a gradient. The step
    /// counter is incremented before bias correction.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = (&'a str, &'a mut Tensor<T>)>) {
        self.state.step += 1;
        let c = self.config;
        let t = self.state.step as i32;
        let f = T::from_f64_lossy;
        let (b1, b2, eps) = (f(c.beta1), f(c.beta2), f(c.eps));
        let bc1 = f(1.0 - c.beta1.powi(t));
        let bc2 = f(1.0 - c.beta2.powi(t));
        let lr = f(c.lr);
        let decay = f(c.lr * c.weight_decay);
        for (name, param) in params {
            let Some(grad) = param.grad.take() else { continue };
            let n = grad.len();
            let m = self.state.first.entry(name.to_string()).or_insert_with(|| vec![T::zero(); n]);
            let v = self.state.second.entry(name.to_string()).or_insert_with(|| vec![T::zero(); n]);
            assert_eq!(m.len(), n, "moment shape mismatch for {name}");
            for (((p, &g), m), v) in param.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p = *p - decay * *p - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

/// Cosine annealing from `eta0` at step 0 to `eta_min` at step `total`.
/// Steps past `total` stay at `eta_min`.
pub fn cosine_lr(step: u64, total: u64, eta0: f64, eta_min: f64) -> f64 {
    if total == 0 || step >= total {
        return eta_min;
    }
    let frac = step as f64 / total as f64;
    eta_min + 0.5 * (eta0 - eta_min) * (1.0 + (std::f64::consts::PI * frac).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(v: f64, g: f64) -> Tensor<f64> {
        let mut t = Tensor::new(vec![1], vec![v]).unwrap().with_grad();
        t.grad = Some(vec![g]);
        t
    }

    #[test]
    fn zero_gradient_only_decays() {
        let mut opt = AdamW::<f64>::new(AdamWConfig {
            lr: 0.001,
            weight_decay: 0.01,
            ..Default::default()
        });
        let mut p = param(2.0, 0.0);
        opt.step([("p", &mut p)]);
        assert_eq!(p.data()[0], 2.0 - 0.001 * 0.01 * 2.0);
    }

    #[test]
    fn single_step_closed_form() {
        let cfg = AdamWConfig::default();
        let mut opt = AdamW::<f64>::new(cfg);
        let mut p = param(1.0, 1.0);
        opt.step([("p", &mut p)]);
        // m = 0.1, v = 0.001; bias correction turns both into 1.
        let m_hat = 0.1 / (1.0 - 0.9);
        let v_hat = 0.001 / (1.0 - 0.999);
        let expect = 1.0 - 0.001 * 0.01 * 1.0 - 0.001 * m_hat / (f64::sqrt(v_hat) + 1e-8);
        assert!((p.data()[0] - expect).abs() < 1e-15, "{} vs {expect}", p.data()[0]);
        assert!((p.data()[0] - (1.0 - 1e-5 - 0.001 / (1.0 + 1e-8))).abs() < 1e-12);
        assert_eq!(opt.state.step, 1);
    }

    #[test]
    fn identical_params_stay_identical() {
        let mut opt = AdamW::<f32>::new(AdamWConfig::default());
        let mut a = Tensor::new(vec![3], vec![0.3f32, -1.0, 2.0]).unwrap().with_grad();
        let mut b = a.clone();
        for i in 0..25 {
            let g: Vec<f32> = (0..3).map(|j| ((i * 3 + j) as f32).sin()).collect();
            a.grad = Some(g.clone());
            b.grad = Some(g);
            opt.step([("a", &mut a), ("b", &mut b)]);
        }
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(0, 100, 0.001, 0.0), 0.001);
        assert_eq!(cosine_lr(100, 100, 0.001, 1e-5), 1e-5);
        assert_eq!(cosine_lr(250, 100, 0.001, 1e-5), 1e-5);
        assert!((cosine_lr(50, 100, 0.001, 1e-5) - (0.001 + 1e-5) / 2.0).abs() < 1e-15);
    }
}
