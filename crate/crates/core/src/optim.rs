use crate::nn::{Module, Param};
use crate::scalar::Scalar;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.99, eps: 1e-8, weight_decay: 0.01, clip_norm: Some(1.0) }
    }
}

/// Adam with decoupled weight decay. Moment buffers follow the module's
/// parameter visiting order.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    pub step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Self {
        Self { config, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn grad_norm<M: Module<T> + ?Sized>(model: &M) -> f64 {
        let mut sq = 0.0;
        model.visit(&mut |p: &Param<T>| {
            if !p.frozen {
                sq += p.grad.iter().map(|g| g.to_f64().unwrap().powi(2)).sum::<f64>();
            }
        });
        sq.sqrt()
    }

    /// Applies one update from the accumulated gradients, then clears them.
    pub fn step<M: Module<T> + ?Sized>(&mut self, model: &mut M) {
        let clip = match self.config.clip_norm {
            Some(c) => {
                let n = Self::grad_norm(model);
                if n > c { c / n } else { 1.0 }
            }
            None => 1.0,
        };
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let f = |x: f64| T::from_f64(x).unwrap();
        let (b1, b2, eps, lr, wd, clip_t) = (f(c.beta1), f(c.beta2), f(c.eps), f(c.lr), f(c.weight_decay), f(clip));
        let (bc1, bc2) = (f(bc1), f(bc2));
        let mut idx = 0;
        let (ms, vs) = (&mut self.m, &mut self.v);
        model.visit_mut(&mut |p: &mut Param<T>| {
            if ms.len() <= idx {
                ms.push(vec![T::zero(); p.len()]);
                vs.push(vec![T::zero(); p.len()]);
            }
            if !p.frozen {
                let (m, v) = (&mut ms[idx], &mut vs[idx]);
                for i in 0..p.len() {
                    let g = p.grad[i] * clip_t;
                    m[i] = b1 * m[i] + (T::one() - b1) * g;
                    v[i] = b2 * v[i] + (T::one() - b2) * g * g;
                    let mhat = m[i] / bc1;
                    let vhat = v[i] / bc2;
                    let w = p.value[i];
                    p.value[i] = w - lr * (mhat / (vhat.sqrt() + eps) + wd * w);
                }
            }
            p.zero_grad();
            idx += 1;
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Quad {
        p: Param<f64>,
    }
    impl Module<f64> for Quad {
        fn visit(&self, f: &mut dyn FnMut(&Param<f64>)) {
            f(&self.p)
        }
        fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<f64>)) {
            f(&mut self.p)
        }
    }

    #[test]
    fn minimizes_quadratic() {
        let mut q = Quad { p: Param::filled(2, 3.0) };
        let mut opt = AdamW::new(AdamWConfig { lr: 0.05, weight_decay: 0.0, clip_norm: None, ..Default::default() });
        for _ in 0..500 {
            for i in 0..2 {
                q.p.grad[i] = 2.0 * (q.p.value[i] - 1.0);
            }
            opt.step(&mut q);
        }
        assert!(q.p.value.iter().all(|v| (v - 1.0).abs() < 1e-2), "{:?}", q.p.value);
    }

    #[test]
    fn frozen_params_do_not_move() {
        let mut q = Quad { p: Param::filled(2, 3.0) };
        q.p.frozen = true;
        q.p.grad = vec![1.0, 1.0];
        let mut opt = AdamW::new(AdamWConfig::default());
        opt.step(&mut q);
        assert_eq!(q.p.value, vec![3.0, 3.0]);
        assert_eq!(q.p.grad, vec![0.0, 0.0]);
    }
}
