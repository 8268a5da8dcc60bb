use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{rows_of, Discriminator, DiscriminatorConfig, ExpertGenerator, ForwardMode, GeneratorConfig};
use crate::config::{RoutingMode, RunConfig, Task};
use crate::dcc::DccState;
use crate::error::{Error, Result};
use crate::gating::{adaptive_k, candidates, topk_gate, GatingConfig, GatingNetwork};
use crate::tensor::{softmax_rows, Real, Tensor};
use crate::voxel::VoxelGrid;

/// Expert pool, discriminator, gating network and routing state.
#[derive(Debug)]
pub struct MoeModel {
    pub config: RunConfig,
    pub experts: Vec<ExpertGenerator>,
    pub discriminator: Discriminator,
    pub gate: GatingNetwork,
    pub dcc: DccState,
}

/// Result of a soft- or hard-routed inference pass.
#[derive(Clone, Debug)]
pub struct Inference {
    /// `[B, 1, R, R, R]`.
    pub output: Tensor,
    /// Per-sample gate vectors actually applied.
    pub gates: Vec<Vec<Real>>,
    /// Full expert passes per sample.
    pub expert_forwards: Vec<usize>,
}

impl MoeModel {
    pub fn new<R: Rng + ?Sized>(config: &RunConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let res = config.data.resolution;
        let completion = config.task == Task::Completion;
        let gcfg = GeneratorConfig::from_model(&config.model, res, completion);
        let experts = (0..config.model.n_experts)
            .map(|i| ExpertGenerator::new(i, gcfg.clone(), rng))
            .collect::<Result<Vec<_>>>()?;
        let discriminator = Discriminator::new(DiscriminatorConfig::from_model(&config.model, res), rng)?;
        let gate = GatingNetwork::new(
            GatingConfig {
                n_experts: config.model.n_experts,
                latent_dim: config.model.latent_dim,
                partial_dim: if completion { res.pow(3) } else { 0 },
                feature_dim: gcfg.feature_dim(),
                hidden: config.model.gate_hidden.map(|h| config.model.scaled(h)),
                use_features: config.model.expert_features,
            },
            rng,
        )?;
        let dcc = DccState::new(&config.dcc_config());
        Ok(Self {
            config: config.clone(),
            experts,
            discriminator,
            gate,
            dcc,
        })
    }

    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn completion(&self) -> bool {
        self.config.task == Task::Completion
    }

    pub fn resolution(&self) -> usize {
        self.config.data.resolution
    }

    /// Pooled features of every expert from eval-mode partial passes
    /// (zeros when the gating network ignores them) and the number of
    /// partial passes run per sample.
    pub fn features(&mut self, z: &Tensor, x_p: Option<&Tensor>) -> Result<(Vec<Tensor>, usize)> {
        let b = z.shape()[0];
        if !self.gate.config.use_features {
            let dim = self.gate.config.feature_dim;
            return Ok((vec![Tensor::zeros(&[b, dim]); self.n_experts()], 0));
        }
        let feats = self
            .experts
            .iter_mut()
            .map(|e| e.infer(z, x_p, ForwardMode::Partial).map(|(_, f)| f))
            .collect::<Result<Vec<_>>>()?;
        Ok((feats, self.n_experts()))
    }

    /// Flattened `[B, R³]` view of a `[B, 1, R, R, R]` partial batch.
    pub fn flat_partial(x_p: Option<&Tensor>) -> Result<Option<Tensor>> {
        x_p.map(|x| {
            let b = x.shape()[0];
            x.reshape(&[b, x.numel() / b])
        })
        .transpose()
    }

    /// Routing probabilities `[B, n]` at the current temperature.
    pub fn probabilities(&self, z: &Tensor, x_p: Option<&Tensor>, features: &[Tensor]) -> Result<Vec<Real>> {
        let flat = Self::flat_partial(x_p)?;
        let scores = self.gate.scores(z, flat.as_ref(), features)?;
        softmax_rows(scores.data(), self.n_experts(), self.dcc.tau)
    }

    /// Candidate experts per sample in preference order.
    pub fn candidates(&self, probs: &[Real]) -> Result<Vec<Vec<usize>>> {
        let n = self.n_experts();
        let r = &self.config.routing;
        probs
            .chunks(n)
            .map(|p| {
                let k = if r.adaptive_k { adaptive_k(p, r.k_min, r.k_max)? } else { r.k };
                Ok(candidates(p, k))
            })
            .collect()
    }

    /// Gate vectors for inference: top-k probabilities (soft) or the
    /// argmax expert with weight one (hard).
    pub fn inference_gates(&self, probs: &[Real]) -> Result<Vec<Vec<Real>>> {
        let n = self.n_experts();
        let cands = self.candidates(probs)?;
        probs
            .chunks(n)
            .zip(cands)
            .map(|(p, c)| match self.config.routing.inference_mode {
                RoutingMode::Soft => topk_gate(p, c.len(), self.config.routing.renormalize),
                RoutingMode::Hard => {
                    let mut g = vec![0.0; n];
                    g[c[0]] = 1.0;
                    Ok(g)
                }
            })
            .collect()
    }

    /// Eval-mode mixture `Σ g_i h_i`, running each expert only on the rows
    /// where its gate is nonzero.
    pub fn infer(&mut self, z: &Tensor, x_p: Option<&Tensor>) -> Result<Inference> {
        let b = z.shape()[0];
        let n = self.n_experts();
        let (features, _) = self.features(z, x_p)?;
        let probs = self.probabilities(z, x_p, &features)?;
        let gates = self.inference_gates(&probs)?;
        let r = self.resolution();
        let row = r.pow(3);
        let mut out = vec![0.0; b * row];
        let mut forwards = vec![0; b];
        for e in 0..n {
            let rows: Vec<usize> = (0..b).filter(|&i| gates[i][e] != 0.0).collect();
            if rows.is_empty() {
                continue;
            }
            let ze = rows_of(z, &rows)?;
            let xe = x_p.map(|x| rows_of(x, &rows)).transpose()?;
            let (h, _) = self.experts[e].infer(&ze, xe.as_ref(), ForwardMode::Full)?;
            let h = h.expect("full pass");
            for (j, &i) in rows.iter().enumerate() {
                forwards[i] += 1;
                let g = gates[i][e];
                out[i * row..(i + 1) * row]
                    .iter_mut()
                    .zip(&h.data()[j * row..(j + 1) * row])
                    .for_each(|(o, v)| *o += g * v);
            }
        }
        Ok(Inference {
            output: Tensor::new(vec![b, 1, r, r, r], out)?,
            gates,
            expert_forwards: forwards,
        })
    }

    pub fn sample_latent<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Tensor {
        let d = self.config.model.latent_dim;
        let data = (0..count * d).map(|_| rng.sample::<f64, _>(StandardNormal) as Real).collect();
        Tensor::new(vec![count, d], data).expect("latent shape")
    }

    fn grids(&self, t: &Tensor) -> Result<Vec<VoxelGrid>> {
        let r = self.resolution();
        t.data()
            .chunks(r.pow(3))
            .map(|c| VoxelGrid::from_slice_clamped(r, c))
            .collect()
    }

    /// Unconditional samples.
    pub fn generate(&mut self, count: usize, seed: u64) -> Result<Vec<VoxelGrid>> {
        if self.completion() {
            return Err(Error::invalid("this model was trained for completion; use complete"));
        }
        let z = self.sample_latent(count, &mut ChaCha8Rng::seed_from_u64(seed));
        let out = self.infer(&z, None)?;
        self.grids(&out.output)
    }

    /// Completes each partial shape.
    pub fn complete(&mut self, partials: &[VoxelGrid], seed: u64) -> Result<Vec<VoxelGrid>> {
        if !self.completion() {
            return Err(Error::invalid("this model was trained for generation; use generate"));
        }
        if partials.is_empty() {
            return Ok(Vec::new());
        }
        let z = self.sample_latent(partials.len(), &mut ChaCha8Rng::seed_from_u64(seed));
        let xp = self.partial_batch(partials)?;
        let out = self.infer(&z, Some(&xp))?;
        self.grids(&out.output)
    }

    /// Expert with the highest gate probability for each partial shape,
    /// using the same latent draw as [`MoeModel::complete`].
    pub fn top_experts(&mut self, partials: &[VoxelGrid], seed: u64) -> Result<Vec<usize>> {
        if !self.completion() {
            return Err(Error::invalid("top experts need a completion model"));
        }
        if partials.is_empty() {
            return Ok(Vec::new());
        }
        let z = self.sample_latent(partials.len(), &mut ChaCha8Rng::seed_from_u64(seed));
        let xp = self.partial_batch(partials)?;
        let (features, _) = self.features(&z, Some(&xp))?;
        let probs = self.probabilities(&z, Some(&xp), &features)?;
        Ok(probs
            .chunks(self.n_experts())
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold(0, |best, (i, &p)| if p > row[best] { i } else { best })
            })
            .collect())
    }

    fn partial_batch(&self, partials: &[VoxelGrid]) -> Result<Tensor> {
        let r = self.resolution();
        if let Some(bad) = partials.iter().find(|p| p.resolution() != r) {
            return Err(Error::invalid(format!(
                "partial shape has resolution {}, model expects {r}",
                bad.resolution()
            )));
        }
        let mut data = Vec::with_capacity(partials.len() * r.pow(3));
        partials.iter().for_each(|p| data.extend_from_slice(p.values()));
        Tensor::new(vec![partials.len(), 1, r, r, r], data)
    }
}
