use super::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::Real;

/// Adam with bias correction. One instance per parameter store.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: Real,
    pub beta1: Real,
    pub beta2: Real,
    pub eps: Real,
    step: u64,
    first: Vec<Vec<Real>>,
    second: Vec<Vec<Real>>,
}

impl Adam {
    pub fn new(lr: Real, beta1: Real, beta2: Real) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every trainable entry, then clears gradients.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        for (name, t) in store.iter() {
            if t.requires_grad() && t.grad().is_none() {
                return Err(Error::MissingGrad(name.to_string()));
            }
        }
        if self.first.is_empty() {
            self.first = store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
            self.second = self.first.clone();
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<_> = (0..store.len()).map(super::ParamId).collect();
        for (i, id) in ids.into_iter().enumerate() {
            let p = store.get_mut(id);
            if !p.requires_grad() {
                continue;
            }
            let g = p.grad().unwrap().to_vec();
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                *w -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        store.zero_grad();
        Ok(())
    }

    /// First and second moment buffers, one per store entry (empty before
    /// the first step).
    pub fn moments(&self) -> (&[Vec<Real>], &[Vec<Real>]) {
        (&self.first, &self.second)
    }

    pub fn restore(&mut self, step: u64, first: Vec<Vec<Real>>, second: Vec<Vec<Real>>) {
        self.step = step;
        self.first = first;
        self.second = second;
    }
}
