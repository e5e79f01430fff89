//! Projected Adam and the learning-rate schedule.

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// One bias-corrected update followed by clamping entries flagged in
    /// `nonneg` at zero.
    pub fn step(&mut self, theta: &mut [f64], grad: &[f64], lr: f64, nonneg: &[bool]) {
        assert_eq!(theta.len(), grad.len());
        assert_eq!(theta.len(), self.m.len());
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..theta.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            theta[i] -= lr * mh / (vh.sqrt() + self.eps);
        }
        project(theta, nonneg);
    }
}

pub fn project(theta: &mut [f64], nonneg: &[bool]) {
    for (x, &c) in theta.iter_mut().zip(nonneg) {
        if c && *x < 0.0 {
            *x = 0.0;
        }
    }
}

/// `lr · decay^(epoch / interval)`, decaying smoothly between intervals.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub lr: f64,
    pub decay: f64,
    pub interval: usize,
}

impl Schedule {
    pub fn at(&self, epoch: usize) -> f64 {
        self.lr * self.decay.powf(epoch as f64 / self.interval.max(1) as f64)
    }
}
