//! Adam optimiser and a reduce-on-plateau learning-rate schedule.

use std::collections::HashMap;

use ndarray::Zip;

use crate::nn::ParamStore;
use crate::tape::Arr;

/// Adam with the standard bias-corrected first/second moment estimates.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: HashMap<String, Arr>,
    v: HashMap<String, Arr>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    /// Apply one update from named gradients (as returned by
    /// `Tape::param_grads`).  Parameters without a gradient are untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(&str, &Arr)]) {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for (name, grad) in grads {
            let m = self
                .m
                .entry(name.to_string())
                .or_insert_with(|| Arr::zeros(grad.raw_dim()));
            let v = self
                .v
                .entry(name.to_string())
                .or_insert_with(|| Arr::zeros(grad.raw_dim()));
            let mut value = store.get(name).clone();
            Zip::from(&mut value)
                .and(m)
                .and(v)
                .and(*grad)
                .for_each(|p, m, v, &g| {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
                });
            store.set(name, value);
        }
    }
}

/// Halve (or scale by `factor`) the learning rate when a monitored metric
/// has not improved for `patience` consecutive evaluations.
pub struct ReduceLrOnPlateau {
    pub factor: f64,
    pub patience: usize,
    best: f64,
    stale: usize,
}

impl ReduceLrOnPlateau {
    pub fn new(factor: f64, patience: usize) -> Self {
        assert!(factor > 0.0 && factor < 1.0, "plateau factor must be in (0, 1)");
        Self {
            factor,
            patience,
            best: f64::INFINITY,
            stale: 0,
        }
    }

    /// Record a new value of the monitored metric (lower is better).
    /// Returns `true` when the learning rate was reduced on this call.
    pub fn observe(&mut self, metric: f64, lr: &mut f64) -> bool {
        if metric < self.best {
            self.best = metric;
            self.stale = 0;
            return false;
        }
        self.stale += 1;
        if self.stale >= self.patience {
            *lr *= self.factor;
            self.stale = 0;
            return true;
        }
        false
    }
}
