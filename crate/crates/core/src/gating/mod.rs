//! Context-aware gating: affinity scores, temperature softmax, top-k
//! sparsification, mixture output and capacity-constrained routing.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dcc::{entropy, DccState};
use crate::error::{Error, Result};
use crate::nn::{Linear, ParamStore};
use crate::tensor::{softmax_rows, Real, Tape, Tensor, Var};
use crate::voxel::VoxelGrid;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GatingConfig {
    pub n_experts: usize,
    pub latent_dim: usize,
    /// Width of the flattened partial-input slot (`R³`, or 0 for generation only).
    pub partial_dim: usize,
    /// Pooled feature width per expert.
    pub feature_dim: usize,
    pub hidden: [usize; 2],
    /// When false the expert features are dropped from the input.
    pub use_features: bool,
}

/// MLP `concat(z, x_p, f_1..f_n) → GeLU → GeLU → n` scores.
#[derive(Debug)]
pub struct GatingNetwork {
    pub config: GatingConfig,
    pub store: ParamStore,
    layers: [Linear; 3],
}

impl GatingNetwork {
    pub fn new<R: Rng + ?Sized>(config: GatingConfig, rng: &mut R) -> Result<Self> {
        if config.n_experts == 0 || config.latent_dim == 0 {
            return Err(Error::invalid("gating network needs at least one expert and a latent"));
        }
        let mut store = ParamStore::new();
        let input = Self::input_width(&config);
        let [h1, h2] = config.hidden;
        let layers = [
            Linear::new(&mut store, "gate.fc1", input, h1, rng),
            Linear::new(&mut store, "gate.fc2", h1, h2, rng),
            Linear::new(&mut store, "gate.out", h2, config.n_experts, rng),
        ];
        Ok(Self { config, store, layers })
    }

    fn input_width(c: &GatingConfig) -> usize {
        let features = if c.use_features { c.n_experts * c.feature_dim } else { 0 };
        c.latent_dim + c.partial_dim + features
    }

    pub fn n_experts(&self) -> usize {
        self.config.n_experts
    }

    pub fn zero_init(&mut self) {
        for l in &self.layers {
            l.zero_init(&mut self.store);
        }
    }

    /// Assembles the MLP input for a batch. `z: [B, d]`, `x_p: [B, partial_dim]`
    /// or absent (zeros), `features[i]: [B, feature_dim]`.
    pub fn input(&self, z: &Tensor, x_p: Option<&Tensor>, features: &[Tensor]) -> Result<Tensor> {
        let c = &self.config;
        if features.len() != c.n_experts {
            return Err(Error::invalid(format!(
                "expected features from {} experts, found {}",
                c.n_experts,
                features.len()
            )));
        }
        let b = check_rows(z, c.latent_dim, "gating latent")?;
        if let Some(xp) = x_p {
            if check_rows(xp, c.partial_dim, "gating partial input")? != b {
                return Err(shape_err(xp, z, "gating partial input"));
            }
        }
        for f in features {
            if check_rows(f, c.feature_dim, "gating expert feature")? != b {
                return Err(shape_err(f, z, "gating expert feature"));
            }
        }
        let width = Self::input_width(c);
        let mut data = Vec::with_capacity(b * width);
        for r in 0..b {
            data.extend_from_slice(&z.data()[r * c.latent_dim..(r + 1) * c.latent_dim]);
            match x_p {
                Some(xp) => data.extend_from_slice(&xp.data()[r * c.partial_dim..(r + 1) * c.partial_dim]),
                None => data.extend(std::iter::repeat_n(0.0, c.partial_dim)),
            }
            if c.use_features {
                for f in features {
                    data.extend_from_slice(&f.data()[r * c.feature_dim..(r + 1) * c.feature_dim]);
                }
            }
        }
        Tensor::new(vec![b, width], data)
    }

    /// Scores `[B, n]` on `tape` from a prepared input.
    pub fn forward<'t>(&self, tape: &'t Tape, input: Var<'t>) -> Result<Var<'t>> {
        self.forward_with(tape, &self.store, input)
    }

    /// Same as [`forward`](Self::forward) but reading parameters from `store`,
    /// which must share this network's layout (e.g. a clone of `self.store`).
    pub fn forward_with<'t>(&self, tape: &'t Tape, store: &ParamStore, input: Var<'t>) -> Result<Var<'t>> {
        let [l1, l2, l3] = &self.layers;
        let h = l1.forward(tape, store, input)?.gelu();
        let h = l2.forward(tape, store, h)?.gelu();
        l3.forward(tape, store, h)
    }

    /// Scores `[B, n]` without recording gradients.
    pub fn scores(&self, z: &Tensor, x_p: Option<&Tensor>, features: &[Tensor]) -> Result<Tensor> {
        let tape = Tape::new();
        let input = tape.constant(self.input(z, x_p, features)?);
        let out = self.forward(&tape, input)?;
        let value = (*out.value()).clone();
        Ok(value.with_requires_grad(false))
    }
}

fn check_rows(t: &Tensor, width: usize, context: &'static str) -> Result<usize> {
    if t.ndim() != 2 || t.shape()[1] != width {
        return Err(Error::ShapeMismatch {
            lhs: t.shape().to_vec(),
            rhs: vec![t.shape()[0], width],
            context,
        });
    }
    Ok(t.shape()[0])
}

fn shape_err(a: &Tensor, b: &Tensor, context: &'static str) -> Error {
    Error::ShapeMismatch {
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
        context,
    }
}

/// Scores for one sample. A missing `x_p` fills its slot with zeros.
pub fn affinity_scores(
    gn: &GatingNetwork,
    z: &[Real],
    x_p: Option<&VoxelGrid>,
    features: &[Vec<Real>],
) -> Result<Vec<Real>> {
    let z = Tensor::new(vec![1, z.len()], z.to_vec())?;
    let xp = x_p
        .map(|g| Tensor::new(vec![1, g.len()], g.values().to_vec()))
        .transpose()?;
    let f = features
        .iter()
        .map(|f| Tensor::new(vec![1, f.len()], f.clone()))
        .collect::<Result<Vec<_>>>()?;
    Ok(gn.scores(&z, xp.as_ref(), &f)?.into_data())
}

/// Routing quantities for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct GatingState {
    pub scores: Vec<Real>,
    pub probs: Vec<Real>,
    pub gates: Vec<Real>,
    pub temperature: Real,
    pub k: usize,
}

impl GatingState {
    pub fn new(scores: Vec<Real>, temperature: Real, k: usize, renormalize: bool) -> Result<Self> {
        let n = scores.len();
        let probs = softmax_rows(&scores, n.max(1), temperature)?;
        let gates = topk_gate(&probs, k, renormalize)?;
        Ok(Self {
            scores,
            probs,
            gates,
            temperature,
            k,
        })
    }

    pub fn candidates(&self) -> Vec<usize> {
        candidates(&self.probs, self.k)
    }
}

/// Indices of the `k` largest entries of `p`, descending, ties to the lower index.
pub fn candidates(p: &[Real], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..p.len()).collect();
    idx.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Keeps the top `k` probabilities and zeroes the rest.
pub fn topk_gate(p: &[Real], k: usize, renormalize: bool) -> Result<Vec<Real>> {
    if k == 0 || k > p.len() {
        return Err(Error::invalid(format!("k must lie in 1..={}, got {k}", p.len())));
    }
    let mut g = vec![0.0; p.len()];
    for i in candidates(p, k) {
        g[i] = p[i];
    }
    if renormalize {
        let total: Real = g.iter().sum();
        if total > 0.0 {
            g.iter_mut().for_each(|v| *v /= total);
        }
    }
    Ok(g)
}

/// `Σ g_i h_i`, calling `expert(i)` only for nonzero gates.
pub fn mixture_output<F>(g: &[Real], mut expert: F) -> Result<Vec<Real>>
where
    F: FnMut(usize) -> Result<Vec<Real>>,
{
    let mut out: Option<Vec<Real>> = None;
    for (i, &w) in g.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let h = expert(i)?;
        match out.as_mut() {
            None => out = Some(h.iter().map(|v| w * v).collect()),
            Some(acc) => {
                if acc.len() != h.len() {
                    return Err(Error::ShapeMismatch {
                        lhs: vec![acc.len()],
                        rhs: vec![h.len()],
                        context: "mixture output",
                    });
                }
                acc.iter_mut().zip(&h).for_each(|(a, v)| *a += w * v);
            }
        }
    }
    out.ok_or_else(|| Error::invalid("all gates are zero"))
}

/// Where one sample was routed.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingDecision {
    pub candidates: Vec<usize>,
    pub expert: usize,
    pub weights: Vec<Real>,
    pub overflow: bool,
}

/// Hard assignment in batch order: first candidate with `L_i < C_i`, else
/// the expert with the largest residual relative capacity (flagged).
/// Resets the loads in `dcc` first.
pub fn route_with_capacity(candidates: &[Vec<usize>], dcc: &mut DccState) -> Result<Vec<RoutingDecision>> {
    let n = dcc.n_experts();
    dcc.reset_loads();
    let mut out = Vec::with_capacity(candidates.len());
    for cand in candidates {
        if cand.is_empty() || cand.iter().any(|&i| i >= n) {
            return Err(Error::invalid(format!("bad candidate list {cand:?} for {n} experts")));
        }
        let free = cand
            .iter()
            .copied()
            .find(|&i| (dcc.loads[i] as Real) < dcc.capacities[i]);
        let (expert, overflow) = match free {
            Some(i) => (i, false),
            None => {
                let residual = |i: usize| (dcc.capacities[i] - dcc.loads[i] as Real) / dcc.capacities[i];
                let best = (1..n).fold(0, |b, i| if residual(i) > residual(b) { i } else { b });
                (best, true)
            }
        };
        dcc.loads[expert] += 1;
        if overflow {
            dcc.overflow += 1;
        }
        let mut weights = vec![0.0; n];
        weights[expert] = 1.0;
        out.push(RoutingDecision {
            candidates: cand.clone(),
            expert,
            weights,
            overflow,
        });
    }
    Ok(out)
}

/// `k_min + floor(H(p)/ln n · (k_max − k_min + 1))`, clamped.
pub fn adaptive_k(p: &[Real], k_min: usize, k_max: usize) -> Result<usize> {
    let n = p.len();
    if k_min == 0 || k_min > k_max || k_max > n {
        return Err(Error::invalid(format!(
            "need 1 ≤ k_min ≤ k_max ≤ {n}, got {k_min} and {k_max}"
        )));
    }
    if n == 1 {
        return Ok(k_min);
    }
    let ratio = entropy(p) / (n as Real).ln();
    let k = k_min + (ratio * (k_max - k_min + 1) as Real).floor().max(0.0) as usize;
    Ok(k.clamp(k_min, k_max))
}

#[cfg(test)]
mod tests;
