//! AdamW with decoupled weight decay applied to weights only.

use super::net::{Grads, Net};
use super::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step<F: Real>(&mut self, net: &mut Net<F>, grads: &Grads) {
        if self.m.is_empty() {
            for g in grads {
                self.m.push(vec![0.0; g.weight.len()]);
                self.m.push(vec![0.0; g.bias.len()]);
            }
            self.v = self.m.clone();
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (lr, b1, b2, eps, wd) = (self.lr, self.beta1, self.beta2, self.eps, self.weight_decay);
        let (ms, vs) = (&mut self.m, &mut self.v);
        net.for_each_param(grads, |slot, params, g| {
            // even slots hold weights, odd slots biases
            let decay = if slot % 2 == 0 { wd } else { 0.0 };
            let (m, v) = (&mut ms[slot], &mut vs[slot]);
            for i in 0..params.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps);
                let p = params[i].to_acc();
                params[i] = F::from_acc(p - lr * (update + decay * p));
            }
        });
    }
}
