use serde::{Deserialize, Serialize};

use super::mat::Mat;
use super::params::{Gradients, ParamStore};

/// Constant rate until `knee`, then exponential decay by `decay_rate` every
/// `decay_steps` steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base: f64,
    pub knee: usize,
    pub decay_rate: f64,
    pub decay_steps: usize,
}

impl LrSchedule {
    pub fn constant(base: f64) -> Self {
        Self {
            base,
            knee: usize::MAX,
            decay_rate: 1.0,
            decay_steps: 1,
        }
    }

    pub fn at(&self, step: usize) -> f64 {
        if step < self.knee {
            self.base
        } else {
            let e = (step - self.knee) as f64 / self.decay_steps.max(1) as f64;
            self.base * self.decay_rate.powf(e)
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Mat>,
    pub v: Vec<Mat>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Mat> = store.iter().map(|(_, _, p)| Mat::zeros(p.rows, p.cols)).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Clips to `max_norm` (if positive) and applies one update. Returns the
    /// gradient norm before clipping.
    pub fn step(&mut self, store: &mut ParamStore, grads: &mut Gradients, lr: f64, max_norm: f64) -> f64 {
        let norm = grads.global_norm();
        if max_norm > 0.0 && norm > max_norm {
            grads.scale(max_norm / norm);
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if store.is_frozen(id) {
                continue;
            }
            let Some(g) = grads.get(id) else { continue };
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let p = store.get_mut(id);
            for k in 0..p.data.len() {
                let gk = g.data[k];
                m.data[k] = self.beta1 * m.data[k] + (1.0 - self.beta1) * gk;
                v.data[k] = self.beta2 * v.data[k] + (1.0 - self.beta2) * gk * gk;
                let mh = m.data[k] / bc1;
                let vh = v.data[k] / bc2;
                p.data[k] -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_halves_after_ten_knees() {
        let s = LrSchedule {
            base: 1e-3,
            knee: 2000,
            decay_rate: 0.5,
            decay_steps: 20000,
        };
        assert_eq!(s.at(0), 1e-3);
        assert_eq!(s.at(1999), 1e-3);
        assert_eq!(s.at(2000), 1e-3);
        assert!((s.at(22000) - 5e-4).abs() < 1e-15);
    }
}
