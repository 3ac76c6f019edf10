//! Optimizers and learning-rate schedules used by the trainers.

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    /// Cosine annealing from the base rate to zero over the run.
    Cosine,
    /// Linear warmup over the first tenth of the run, then cosine decay.
    WarmupCosine,
}

impl Schedule {
    pub fn lr(self, base: f64, step: usize, total: usize) -> f64 {
        let total = total.max(1);
        let frac = step as f64 / total as f64;
        match self {
            Schedule::Constant => base,
            Schedule::Cosine => 0.5 * base * (1.0 + (std::f64::consts::PI * frac).cos()),
            Schedule::WarmupCosine => {
                let warm = (total / 10).max(1);
                if step < warm {
                    base * (step + 1) as f64 / warm as f64
                } else {
                    let f = (step - warm) as f64 / (total - warm).max(1) as f64;
                    0.5 * base * (1.0 + (std::f64::consts::PI * f).cos())
                }
            }
        }
    }
}

/// Adam with decoupled weight decay.
pub struct AdamW {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: i32,
}

impl AdamW {
    pub fn new(params: &[Tensor], weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, (w, &gr)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gr;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gr * gr;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *w -= lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * *w);
            }
        }
    }
}

/// SGD with heavy-ball momentum and L2 weight decay folded into the gradient.
pub struct Sgd {
    momentum: f64,
    weight_decay: f64,
    buf: Vec<Tensor>,
}

impl Sgd {
    pub fn new(params: &[Tensor], momentum: f64, weight_decay: f64) -> Self {
        Self { momentum, weight_decay, buf: params.iter().map(|p| Tensor::zeros(p.shape())).collect() }
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64) {
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let b = self.buf[i].data_mut();
            for (j, (w, &gr)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let d = gr + self.weight_decay * *w;
                b[j] = self.momentum * b[j] + d;
                *w -= lr * b[j];
            }
        }
    }
}
