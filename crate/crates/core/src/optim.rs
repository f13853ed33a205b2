//! AdamW with decoupled weight decay and a warmup + cosine schedule.

use alloc::string::String;
use alloc::vec::Vec;

use num_traits::Float;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::ParamStore;

/// Linear warmup from 0 to `peak` over `warmup` steps, then cosine decay to
/// `floor` at `total`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub peak: f64,
    pub floor: f64,
    pub warmup: usize,
    pub total: usize,
}

impl Schedule {
    pub fn constant(lr: f64) -> Self {
        Self {
            peak: lr,
            floor: lr,
            warmup: 0,
            total: 0,
        }
    }

    /// Learning rate for step `step` (0-based).
    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.peak * (step + 1) as f64 / self.warmup as f64;
        }
        if self.total <= self.warmup {
            return self.peak;
        }
        let t = ((step - self.warmup) as f64 / (self.total - self.warmup) as f64).min(1.0);
        self.floor + 0.5 * (self.peak - self.floor) * (1.0 + Float::cos(core::f64::consts::PI * t))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Optimiser state: first and second moments per parameter, kept in f64.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: usize,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            m: Vec::new(),
            v: Vec::new(),
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// One update of every non-frozen parameter from its accumulated
    /// gradient. A non-finite gradient aborts before anything is written.
    pub fn step<R: Real>(&mut self, store: &mut ParamStore<R>, lr: f64) -> Result<()> {
        for (_, p) in store.iter() {
            if !p.frozen && p.grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteGradient {
                    step: self.step,
                    param: String::from(p.name.as_str()),
                });
            }
        }
        while self.m.len() < store.len() {
            self.m.push(Vec::new());
            self.v.push(Vec::new());
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - Float::powi(c.beta1, t);
        let bc2 = 1.0 - Float::powi(c.beta2, t);
        let decay = 1.0 - lr * c.weight_decay;
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let p = store.get_mut(id);
            if p.frozen {
                continue;
            }
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            if m.len() != p.grad.len() {
                *m = alloc::vec![0.0; p.grad.len()];
                *v = alloc::vec![0.0; p.grad.len()];
            }
            let data = p.value.data_mut();
            for i in 0..data.len() {
                let g = p.grad[i].as_f64();
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                let w = data[i].as_f64() * decay - lr * mh / (Float::sqrt(vh) + c.eps);
                data[i] = R::from_f64(w);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use crate::tensor::Tensor;

    #[test]
    fn zero_grad_only_decays() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::new(alloc::vec![3], alloc::vec![1.0, -2.0, 0.5]).unwrap()).unwrap();
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.02,
            ..AdamWConfig::default()
        });
        let lr = 9e-3;
        opt.step(&mut store, lr).unwrap();
        let f = 1.0 - lr * 0.02;
        assert_eq!(store.value(id).data(), &[1.0 * f, -2.0 * f, 0.5 * f]);
    }

    #[test]
    fn frozen_is_bit_unchanged() {
        let mut store = ParamStore::<f32>::new();
        let id = store.add("w", Tensor::new(alloc::vec![2], alloc::vec![0.1, 0.2]).unwrap()).unwrap();
        store.set_frozen(id, true);
        store.get_mut(id).grad = alloc::vec![5.0, -3.0];
        let before = store.value(id).clone();
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.1,
            ..AdamWConfig::default()
        });
        opt.step(&mut store, 0.1).unwrap();
        assert_eq!(
            store.value(id).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            before.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn nan_gradient_reports_step() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::zeros(&[1])).unwrap();
        let mut opt = AdamW::new(AdamWConfig::default());
        opt.step(&mut store, 0.1).unwrap();
        store.get_mut(id).grad[0] = f64::NAN;
        match opt.step(&mut store, 0.1) {
            Err(Error::NonFiniteGradient { step, param }) => {
                assert_eq!(step, 1);
                assert_eq!(param, "w");
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(store.value(id).data()[0], 0.0);
    }

    #[test]
    fn quadratic_converges() {
        let target = 1.7;
        let mut store = ParamStore::<f64>::new();
        let id = store.add("theta", Tensor::new(alloc::vec![1], alloc::vec![-2.0]).unwrap()).unwrap();
        let mut opt = AdamW::new(AdamWConfig::default());
        let sched = Schedule {
            peak: 0.1,
            floor: 0.0,
            warmup: 10,
            total: 500,
        };
        for step in 0..500 {
            store.zero_grad();
            let mut g = Graph::new();
            let th = g.param(&store, id);
            let c = g.constant(Tensor::new(alloc::vec![1], alloc::vec![-target]).unwrap());
            let d = g.add(th, c).unwrap();
            let sq = g.mul(d, d).unwrap();
            let loss = g.sum(sq);
            g.backward(loss, &mut store).unwrap();
            opt.step(&mut store, sched.lr(step)).unwrap();
        }
        assert!((store.value(id).data()[0] - target).abs() < 1e-3);
    }

    #[test]
    fn schedule_shape() {
        let s = Schedule {
            peak: 1.0,
            floor: 0.0,
            warmup: 4,
            total: 12,
        };
        assert_eq!(s.lr(0), 0.25);
        assert_eq!(s.lr(3), 1.0);
        assert_eq!(s.lr(4), 1.0);
        assert!((s.lr(8) - 0.5).abs() < 1e-12);
        assert!(s.lr(12).abs() < 1e-12);
        assert!(s.lr(100).abs() < 1e-12);
        for i in 4..12 {
            assert!(s.lr(i + 1) <= s.lr(i));
        }
    }
}
