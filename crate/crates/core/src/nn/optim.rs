use super::param::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias-corrected moment estimates.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|(_, p)| vec![0.0; p.value.len()])
                .collect::<Vec<_>>()
        };
        Adam {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update from the gradients currently held in `store`.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            if !p.trainable {
                continue;
            }
            let grad = p.grad.data().to_vec();
            for (((w, g), m), v) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(&grad)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;

    fn scalar_store(x: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("x", Tensor::row(&[x]));
        s
    }

    #[test]
    fn zero_grad_is_noop() {
        let mut store = scalar_store(1.5);
        let mut opt = Adam::new(AdamConfig::default(), &store);
        for _ in 0..10 {
            opt.step(&mut store);
        }
        assert_eq!(store.by_name("x").unwrap().value.data()[0], 1.5);
    }

    #[test]
    fn constant_grad_moves_against_it() {
        let mut store = scalar_store(0.0);
        let mut opt = Adam::new(AdamConfig::default(), &store);
        let mut prev = 0.0;
        for _ in 0..50 {
            store.zero_grads();
            store.get_mut(store.id("x").unwrap()).grad.data_mut()[0] = 0.7;
            opt.step(&mut store);
            let x = store.by_name("x").unwrap().value.data()[0];
            assert!(x < prev);
            prev = x;
        }
    }

    #[test]
    fn zero_lr_keeps_params() {
        let mut store = scalar_store(2.0);
        let mut opt = Adam::new(
            AdamConfig {
                lr: 0.0,
                ..AdamConfig::default()
            },
            &store,
        );
        for _ in 0..5 {
            store.get_mut(store.id("x").unwrap()).grad.data_mut()[0] = 3.0;
            opt.step(&mut store);
        }
        assert_eq!(store.by_name("x").unwrap().value.data()[0], 2.0);
    }

    #[test]
    fn quadratic_bowl_converges() {
        // f(x) = (x - 3)^2, minimum at 3
        let mut store = scalar_store(-2.0);
        let mut opt = Adam::new(
            AdamConfig {
                lr: 0.05,
                ..AdamConfig::default()
            },
            &store,
        );
        let id = store.id("x").unwrap();
        let mut converged_at = None;
        for step in 0..2000 {
            let x = store.get(id).value.data()[0];
            if (x - 3.0).abs() < 1e-3 && converged_at.is_none() {
                converged_at = Some(step);
            }
            store.zero_grads();
            store.get_mut(id).grad.data_mut()[0] = 2.0 * (x - 3.0);
            opt.step(&mut store);
        }
        let x = store.get(id).value.data()[0];
        assert!((x - 3.0).abs() < 1e-3, "x = {x}");
        assert!(converged_at.is_some());
    }
}
