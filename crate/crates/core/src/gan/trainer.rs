use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{discriminator_loss, generator_loss, geometric_consistency, rows_of, ForwardMode, LossReport, MoeModel};
use crate::config::{GeomMask, RoutingMode, RunConfig, Task};
use crate::dcc::DccConfig;
use crate::error::{Error, Result};
use crate::gating::{route_with_capacity, topk_gate};
use crate::nn::Adam;
use crate::tensor::{Real, Tape, Tensor, Var};
use crate::voxel::{apply_occlusion, VoxelGrid};

/// What one training iteration did.
#[derive(Clone, Debug, Serialize)]
pub struct StepReport {
    pub iteration: u64,
    pub epoch: usize,
    pub losses: LossSummary,
    pub loads: Vec<usize>,
    pub overflow: usize,
    pub tau: Real,
    /// Expert chosen for (hard) or weighted into (soft) each sample.
    pub experts: Vec<Vec<usize>>,
    /// Full expert passes per sample in the generator step.
    pub full_forwards: Vec<usize>,
    /// Eval-mode expert passes per sample in the gate update.
    pub gate_forwards: Vec<usize>,
    pub gate_loss: Real,
    /// Partial (feature tap) passes per sample.
    pub partial_forwards: usize,
    pub dcc_updated: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossSummary {
    pub d_loss: Real,
    pub g_loss: Real,
    pub geom: Real,
    pub total: Real,
}

impl From<LossSummary> for LossReport {
    fn from(s: LossSummary) -> Self {
        LossReport {
            adv: -s.d_loss,
            d_loss: s.d_loss,
            g_loss: s.g_loss,
            geom: s.geom,
            lambda: 0.0,
        }
    }
}

/// A prepared training batch.
#[derive(Clone, Debug)]
pub struct Batch {
    /// `[B, 1, R, R, R]` complete shapes.
    pub x: Tensor,
    /// Partial shapes in completion mode.
    pub x_p: Option<Tensor>,
    /// Cells compared by the geometric consistency loss.
    pub mask: Option<Tensor>,
    /// `[B, d]`.
    pub z: Tensor,
}

/// Optimizer state for every network in the model.
#[derive(Clone, Debug)]
pub struct Optimizers {
    pub experts: Vec<Adam>,
    pub discriminator: Adam,
    pub gate: Adam,
}

impl Optimizers {
    pub fn new(config: &RunConfig) -> Self {
        let t = &config.train;
        Self {
            experts: (0..config.model.n_experts)
                .map(|_| Adam::new(t.lr_generator, t.beta1, t.beta2))
                .collect(),
            discriminator: Adam::new(t.lr_discriminator, t.beta1, t.beta2),
            gate: Adam::new(t.lr_gate, t.beta1, t.beta2),
        }
    }
}

/// Alternating discriminator / generator updates with capacity-limited
/// routing.
#[derive(Debug)]
pub struct Trainer {
    pub model: MoeModel,
    pub dcc_config: DccConfig,
    pub optim: Optimizers,
    pub data: Vec<VoxelGrid>,
    pub rng: ChaCha8Rng,
    pub epoch: usize,
    pub batch_index: usize,
    order: Vec<usize>,
}

const TRAIN_STREAM: u64 = 0x7261_696e;

impl Trainer {
    pub fn new(config: &RunConfig, data: Vec<VoxelGrid>) -> Result<Self> {
        let mut init = ChaCha8Rng::seed_from_u64(config.seed);
        let model = MoeModel::new(config, &mut init)?;
        Self::with_model(model, data)
    }

    pub fn with_model(model: MoeModel, data: Vec<VoxelGrid>) -> Result<Self> {
        let config = &model.config;
        if data.len() < config.train.batch_size {
            return Err(Error::Config {
                key: "train.batch_size".into(),
                reason: format!("{} exceeds the {} training shapes", config.train.batch_size, data.len()),
            });
        }
        let r = config.data.resolution;
        if let Some(bad) = data.iter().find(|g| g.resolution() != r) {
            return Err(Error::invalid(format!(
                "training shape has resolution {}, config expects {r}",
                bad.resolution()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(TRAIN_STREAM);
        Ok(Self {
            dcc_config: config.dcc_config(),
            optim: Optimizers::new(config),
            data,
            rng,
            epoch: 0,
            batch_index: 0,
            order: Vec::new(),
            model,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.model.config
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.data.len() / self.config().train.batch_size
    }

    pub fn total_iterations(&self) -> u64 {
        (self.batches_per_epoch() * self.config().train.epochs) as u64
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.config().train.epochs
    }

    fn epoch_order(&self, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.data.len()).collect();
        let seed = self.config().seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        order
    }

    /// Draws the next batch: occlusion and latent codes come from the
    /// trainer's RNG.
    pub fn next_batch(&mut self) -> Result<Batch> {
        if self.batch_index == 0 || self.order.is_empty() {
            self.order = self.epoch_order(self.epoch);
            let total = self.config().train.epochs;
            self.model.dcc.set_epoch(self.epoch, total, &self.dcc_config);
        }
        let b = self.config().train.batch_size;
        let r = self.model.resolution();
        let rows = &self.order[self.batch_index * b..(self.batch_index + 1) * b];
        let shapes: Vec<VoxelGrid> = rows.iter().map(|&i| self.data[i].binarize(0.5)).collect();
        let mut x = Vec::with_capacity(b * r.pow(3));
        shapes.iter().for_each(|s| x.extend_from_slice(s.values()));
        let x = Tensor::new(vec![b, 1, r, r, r], x)?;

        let (x_p, mask) = if self.model.config.task == Task::Completion {
            let occ = self.model.config.train.occlusion.clone();
            let geom = self.model.config.train.geom_mask;
            let (mut xp, mut mk) = (Vec::new(), Vec::new());
            for s in &shapes {
                let ratio = if occ.ratio_max > occ.ratio_min {
                    self.rng.random_range(occ.ratio_min..=occ.ratio_max)
                } else {
                    occ.ratio_min
                };
                let mode = occ.modes[self.rng.random_range(0..occ.modes.len())];
                let seed = self.rng.next_u64();
                let (partial, m) = apply_occlusion(s, ratio, mode, seed)?;
                xp.extend_from_slice(partial.values());
                match geom {
                    GeomMask::Observed => mk.extend(m.values.iter().map(|&v| v as Real)),
                    GeomMask::Partial => mk.extend_from_slice(partial.values()),
                }
            }
            let shape = vec![b, 1, r, r, r];
            (Some(Tensor::new(shape.clone(), xp)?), Some(Tensor::new(shape, mk)?))
        } else {
            (None, None)
        };
        let z = self.model.sample_latent(b, &mut self.rng);
        Ok(Batch { x, x_p, mask, z })
    }

    fn advance(&mut self) {
        self.batch_index += 1;
        if self.batch_index >= self.batches_per_epoch() {
            self.batch_index = 0;
            self.epoch += 1;
        }
    }

    /// One iteration on the next batch.
    pub fn train_step(&mut self) -> Result<StepReport> {
        if self.is_done() {
            return Err(Error::invalid("training already finished"));
        }
        let epoch = self.epoch;
        let batch = self.next_batch()?;
        let report = self.step_on(&batch, epoch)?;
        self.advance();
        Ok(report)
    }

    /// Runs every remaining iteration, calling `on_step` after each.
    pub fn train(&mut self, mut on_step: impl FnMut(&Self, &StepReport) -> Result<()>) -> Result<()> {
        while !self.is_done() {
            let report = self.train_step()?;
            on_step(self, &report)?;
        }
        Ok(())
    }

    fn step_on(&mut self, batch: &Batch, epoch: usize) -> Result<StepReport> {
        let b = batch.z.shape()[0];
        let n = self.model.n_experts();
        let iteration = self.model.dcc.iteration;
        let cfg = self.model.config.clone();
        let hard = cfg.routing.train_mode == RoutingMode::Hard;

        // Routing from eval-mode feature taps.
        let (features, partial_forwards) = self.model.features(&batch.z, batch.x_p.as_ref())?;
        let gate_input = {
            let flat = MoeModel::flat_partial(batch.x_p.as_ref())?;
            self.model.gate.input(&batch.z, flat.as_ref(), &features)?
        };
        let probs = self.model.probabilities(&batch.z, batch.x_p.as_ref(), &features)?;
        let cands = self.model.candidates(&probs)?;
        let mut route = vec![0.0; b * n];
        let experts: Vec<Vec<usize>> = if hard {
            let decisions = route_with_capacity(&cands, &mut self.model.dcc)?;
            decisions.iter().map(|d| vec![d.expert]).collect()
        } else {
            self.model.dcc.reset_loads();
            cands
                .iter()
                .map(|c| {
                    self.model.dcc.loads[c[0]] += 1;
                    c.clone()
                })
                .collect()
        };
        for (i, es) in experts.iter().enumerate() {
            es.iter().for_each(|&e| route[i * n + e] = 1.0);
        }
        let route = Tensor::new(vec![b, n], route)?;
        let train_gate = cfg.routing.gate_update && n > 1;

        // Gate weights are constants during the generator step.
        let tape = Tape::new();
        let weights = if hard {
            route.clone()
        } else {
            let g: Vec<Real> = probs
                .chunks(n)
                .zip(&cands)
                .map(|(p, c)| topk_gate(p, c.len(), cfg.routing.renormalize))
                .collect::<Result<Vec<_>>>()?
                .concat();
            Tensor::new(vec![b, n], g)?
        };
        let weights = tape.constant(weights);

        let z = tape.constant(batch.z.clone());
        let xp = batch.x_p.as_ref().map(|x| tape.constant(x.clone()));
        let mut parts = Vec::new();
        let mut used = Vec::new();
        let mut full_forwards = vec![0usize; b];
        for e in 0..n {
            let rows: Vec<usize> = (0..b).filter(|&i| route.data()[i * n + e] != 0.0).collect();
            if rows.is_empty() {
                continue;
            }
            rows.iter().for_each(|&i| full_forwards[i] += 1);
            let ze = z.index_select(&rows)?;
            let xe = xp.map(|x| x.index_select(&rows)).transpose()?;
            let out = self.model.experts[e].forward(&tape, ze, xe, true, ForwardMode::Full)?;
            let h = out.h.expect("full pass");
            let mut onehot = vec![0.0; n];
            onehot[e] = 1.0;
            let w = weights
                .index_select(&rows)?
                .matmul(tape.constant(Tensor::new(vec![n, 1], onehot)?))?
                .reshape(&[rows.len(), 1, 1, 1, 1])?;
            parts.push((h.mul(w)?, rows));
            used.push(e);
        }
        let x_tilde = Var::scatter_rows(&parts, b)?;

        let d_loss = self.discriminator_step(&batch.x, &x_tilde.value())?;

        // Generator (and gate) step against the frozen discriminator.
        let d = &mut self.model.discriminator;
        d.store.set_frozen(true);
        let d_fake = d.forward(&tape, x_tilde, false);
        d.store.set_frozen(false);
        let g_loss = generator_loss(d_fake?);
        let geom = match &batch.mask {
            Some(mask) => Some(geometric_consistency(x_tilde, &batch.x, mask, cfg.train.lambda_geom)?),
            None => None,
        };
        let total = match geom {
            Some(g) => g_loss.add(g)?,
            None => g_loss,
        };
        let losses = LossSummary {
            d_loss,
            g_loss: g_loss.value().item(),
            geom: geom.map_or(0.0, |g| g.value().data()[0]),
            total: total.value().item(),
        };
        if ![losses.d_loss, losses.g_loss, losses.geom, losses.total]
            .iter()
            .all(|v| v.is_finite())
        {
            return Err(Error::NonFinite(format!(
                "loss at iteration {iteration}: d={} g={} geom={}",
                losses.d_loss, losses.g_loss, losses.geom
            )));
        }
        let grads = tape.backward(total)?;
        for &e in &used {
            let expert = &mut self.model.experts[e];
            expert.store.accumulate(&grads);
            self.optim.experts[e].step(&mut expert.store)?;
        }
        let (gate_loss, gate_forwards) = if train_gate {
            self.gate_step(batch, &gate_input, &cands)?
        } else {
            (0.0, vec![0; b])
        };

        let loads = self.model.dcc.loads.clone();
        let overflow = self.model.dcc.overflow;
        let tau = self.model.dcc.tau;
        let dcc_updated = self.model.dcc.end_iteration(&self.dcc_config, b)?;
        Ok(StepReport {
            iteration,
            epoch,
            losses,
            loads,
            overflow,
            tau,
            experts,
            full_forwards,
            gate_forwards,
            partial_forwards,
            gate_loss,
            dcc_updated,
        })
    }

    /// Gating-network update: generator loss of the soft top-k mixture of
    /// eval-mode expert outputs against the frozen discriminator. Returns the
    /// loss and the expert passes spent per sample.
    fn gate_step(&mut self, batch: &Batch, gate_input: &Tensor, cands: &[Vec<usize>]) -> Result<(Real, Vec<usize>)> {
        let b = batch.z.shape()[0];
        let n = self.model.n_experts();
        let r = self.model.resolution();
        let row = r.pow(3);
        let mut forwards = vec![0usize; b];
        let mut mask = vec![0.0; b * n];
        let mut outputs = Vec::new();
        for e in 0..n {
            let rows: Vec<usize> = (0..b).filter(|&i| cands[i].contains(&e)).collect();
            if rows.is_empty() {
                continue;
            }
            let ze = rows_of(&batch.z, &rows)?;
            let xe = batch.x_p.as_ref().map(|x| rows_of(x, &rows)).transpose()?;
            let (h, _) = self.model.experts[e].infer(&ze, xe.as_ref(), ForwardMode::Full)?;
            let h = h.expect("full pass");
            let mut full = vec![0.0; b * row];
            for (j, &i) in rows.iter().enumerate() {
                forwards[i] += 1;
                mask[i * n + e] = 1.0;
                full[i * row..(i + 1) * row].copy_from_slice(&h.data()[j * row..(j + 1) * row]);
            }
            outputs.push((e, Tensor::new(vec![b, 1, r, r, r], full)?));
        }

        let tape = Tape::new();
        let scores = self.model.gate.forward(&tape, tape.constant(gate_input.clone()))?;
        let mut gates = scores
            .softmax_temperature(self.model.dcc.tau)?
            .mul(tape.constant(Tensor::new(vec![b, n], mask)?))?;
        if self.model.config.routing.renormalize {
            let sums = gates.matmul(tape.constant(Tensor::ones(&[n, n])))?;
            gates = gates.div(sums)?;
        }
        let mut mixture: Option<Var> = None;
        for (e, h) in outputs {
            let mut onehot = vec![0.0; n];
            onehot[e] = 1.0;
            let g = gates
                .matmul(tape.constant(Tensor::new(vec![n, 1], onehot)?))?
                .reshape(&[b, 1, 1, 1, 1])?;
            let term = g.mul(tape.constant(h))?;
            mixture = Some(match mixture {
                Some(m) => m.add(term)?,
                None => term,
            });
        }
        let mixture = mixture.expect("every sample has a candidate");
        let d = &mut self.model.discriminator;
        d.store.set_frozen(true);
        let d_out = d.forward(&tape, mixture, false);
        d.store.set_frozen(false);
        let loss = generator_loss(d_out?);
        let value = loss.value().item();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("gate loss {value}")));
        }
        let grads = tape.backward(loss)?;
        self.model.gate.store.accumulate(&grads);
        self.optim.gate.step(&mut self.model.gate.store)?;
        Ok((value, forwards))
    }

    /// Discriminator update(s) on real shapes and a detached fake batch,
    /// evaluated together in one pass. Returns the last loss.
    fn discriminator_step(&mut self, real: &Tensor, fake: &Tensor) -> Result<Real> {
        let b = real.shape()[0];
        let mut both = real.data().to_vec();
        both.extend_from_slice(fake.data());
        let mut shape = real.shape().to_vec();
        shape[0] = 2 * b;
        let both = Tensor::new(shape, both)?;
        let real_rows: Vec<usize> = (0..b).collect();
        let fake_rows: Vec<usize> = (b..2 * b).collect();
        let mut last = 0.0;
        for _ in 0..self.model.config.train.d_steps {
            let tape = Tape::new();
            let d = &mut self.model.discriminator;
            let out = d.forward(&tape, tape.constant(both.clone()), true)?;
            let loss = discriminator_loss(out.index_select(&real_rows)?, out.index_select(&fake_rows)?)?;
            last = loss.value().item();
            if !last.is_finite() {
                return Err(Error::NonFinite(format!("discriminator loss {last}")));
            }
            let grads = tape.backward(loss)?;
            d.store.accumulate(&grads);
            self.optim.discriminator.step(&mut d.store)?;
        }
        Ok(last)
    }
}
