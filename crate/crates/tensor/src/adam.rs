use crate::{Gradients, Tensor};

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &[Tensor], lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    /// Rebuilds an optimizer from saved moments.
    pub fn from_state(lr: f64, step: u64, m: Vec<Tensor>, v: Vec<Tensor>) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step,
            m,
            v,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.m, &self.v)
    }

    /// Appends fresh moment slots for parameters added after construction.
    pub fn extend_for(&mut self, new_params: &[Tensor]) {
        for p in new_params {
            self.m.push(Tensor::zeros(p.shape()));
            self.v.push(Tensor::zeros(p.shape()));
        }
    }

    /// One update. Parameters without a gradient are treated as having a zero gradient.
    pub fn step(&mut self, params: &mut [Tensor], grads: &Gradients) {
        assert_eq!(
            params.len(),
            self.m.len(),
            "optimizer/parameter count mismatch"
        );
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let g = grads.params[i].as_ref().map(Tensor::data);
            for j in 0..m.len() {
                let gj = g.map_or(0.0, |g| g[j]);
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p.data_mut()[j] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}
