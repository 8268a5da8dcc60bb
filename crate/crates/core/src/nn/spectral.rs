use rand::Rng;

use super::{ParamId, ParamStore};
use crate::error::Result;
use crate::tensor::{Real, Tape, Tensor, Var};

/// Below this estimate the weight is treated as zero and left unscaled.
const MIN_SIGMA: Real = 1e-12;

/// Spectral normalization of a weight viewed as `[out, rest]`, with the
/// top singular value estimated by power iteration. `u` and `v` persist in
/// the store as buffers.
#[derive(Clone, Debug)]
pub struct SpectralNorm {
    pub weight: ParamId,
    pub n_power_iterations: usize,
    u: ParamId,
    v: ParamId,
    rows: usize,
    cols: usize,
}

impl SpectralNorm {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, weight: ParamId, rng: &mut R) -> Self {
        let shape = store.get(weight).shape().to_vec();
        let rows = shape[0];
        let cols = shape[1..].iter().product();
        let mut u = Tensor::randn(&[rows], 1.0, rng);
        let mut v = Tensor::randn(&[cols], 1.0, rng);
        normalize(u.data_mut());
        normalize(v.data_mut());
        Self {
            weight,
            n_power_iterations: 1,
            u: store.add(format!("{name}.sn_u"), u, false),
            v: store.add(format!("{name}.sn_v"), v, false),
            rows,
            cols,
        }
    }

    /// `v ← normalize(Wᵀu)`, `u ← normalize(Wv)`, `iterations` times.
    pub fn power_iterate(&self, store: &mut ParamStore, iterations: usize) {
        let w = store.get(self.weight).data().to_vec();
        let mut u = store.get(self.u).data().to_vec();
        let mut v = store.get(self.v).data().to_vec();
        for _ in 0..iterations {
            for (j, vj) in v.iter_mut().enumerate() {
                *vj = (0..self.rows).map(|i| w[i * self.cols + j] * u[i]).sum();
            }
            normalize(&mut v);
            for (i, ui) in u.iter_mut().enumerate() {
                *ui = (0..self.cols).map(|j| w[i * self.cols + j] * v[j]).sum();
            }
            normalize(&mut u);
        }
        store.get_mut(self.u).data_mut().copy_from_slice(&u);
        store.get_mut(self.v).data_mut().copy_from_slice(&v);
    }

    /// Current estimate `σ̂ = uᵀ W v`.
    pub fn sigma(&self, store: &ParamStore) -> Real {
        let w = store.get(self.weight).data();
        let u = store.get(self.u).data();
        let v = store.get(self.v).data();
        (0..self.rows)
            .map(|i| u[i] * (0..self.cols).map(|j| w[i * self.cols + j] * v[j]).sum::<Real>())
            .sum()
    }

    /// Runs the configured power iterations and returns `W / σ̂` as a plain
    /// tensor (or `W` unchanged when `σ̂` vanishes).
    pub fn spectral_normalize(&self, store: &mut ParamStore) -> Tensor {
        self.power_iterate(store, self.n_power_iterations);
        let sigma = self.sigma(store);
        let mut w = store.get(self.weight).clone();
        w.zero_grad();
        if sigma.abs() < MIN_SIGMA {
            log::warn!("spectral norm: weight `{}` is numerically zero", store.name(self.weight));
            return w;
        }
        w.data_mut().iter_mut().for_each(|x| *x /= sigma);
        w
    }

    /// Differentiable normalized weight. `u` and `v` are constants on the
    /// tape; in training mode they are refreshed first.
    pub fn forward<'t>(&self, tape: &'t Tape, store: &mut ParamStore, train: bool) -> Result<Var<'t>> {
        if train {
            self.power_iterate(store, self.n_power_iterations);
        }
        let w = store.bind(tape, self.weight);
        if self.sigma(store).abs() < MIN_SIGMA {
            log::warn!("spectral norm: weight `{}` is numerically zero", store.name(self.weight));
            return Ok(w);
        }
        let u = tape.constant(store.get(self.u).reshape(&[1, self.rows])?);
        let v = tape.constant(store.get(self.v).reshape(&[self.cols, 1])?);
        let sigma = u.matmul(w.reshape(&[self.rows, self.cols])?)?.matmul(v)?.reshape(&[1])?;
        w.div(sigma)
    }
}

fn normalize(x: &mut [Real]) {
    let n = x.iter().map(|v| v * v).sum::<Real>().sqrt();
    if n > 0.0 {
        x.iter_mut().for_each(|v| *v /= n);
    }
}
