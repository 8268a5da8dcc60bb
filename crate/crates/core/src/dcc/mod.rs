//! Dynamic capacity constraint: utilization tracking, capacity and
//! temperature updates, and the three-phase temperature curriculum.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Real;

/// Three-phase temperature curriculum: hold `tau_start`, decay linearly to
/// `tau_end`, then hold `tau_end`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseSchedule {
    pub fractions: [Real; 3],
    pub tau_start: Real,
    pub tau_end: Real,
}

impl Default for PhaseSchedule {
    fn default() -> Self {
        Self {
            fractions: [0.4, 0.4, 0.2],
            tau_start: 1.0,
            tau_end: 0.3,
        }
    }
}

impl PhaseSchedule {
    /// Phase index (0, 1, 2) of `epoch`.
    pub fn phase(&self, epoch: usize, total_epochs: usize) -> usize {
        let t = epoch as Real / total_epochs.max(1) as Real;
        if t < self.fractions[0] {
            0
        } else if t < self.fractions[0] + self.fractions[1] {
            1
        } else {
            2
        }
    }

    pub fn temperature(&self, epoch: usize, total_epochs: usize) -> Real {
        let t = epoch as Real / total_epochs.max(1) as Real;
        match self.phase(epoch, total_epochs) {
            0 => self.tau_start,
            1 => {
                let f = (t - self.fractions[0]) / self.fractions[1];
                self.tau_start + f * (self.tau_end - self.tau_start)
            }
            _ => self.tau_end,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DccConfig {
    pub n_experts: usize,
    pub base_capacity: Real,
    pub momentum: Real,
    pub alpha: Real,
    /// Update period N in iterations.
    pub period: usize,
    pub min_capacity: Real,
    pub eta: Real,
    pub tau_min: Real,
    pub tau_max: Real,
    /// Maximum distance the entropy term may move τ away from the phase base.
    pub tau_band: Real,
    pub task_weights: Vec<Real>,
    pub phases: PhaseSchedule,
}

impl DccConfig {
    /// Defaults with `C_b = (batch / n) · 1.2`.
    pub fn for_batch(n_experts: usize, batch_size: usize) -> Self {
        Self {
            n_experts,
            base_capacity: batch_size as Real / n_experts as Real * 1.2,
            momentum: 0.95,
            alpha: 0.1,
            period: 5,
            min_capacity: 1.0,
            eta: 0.01,
            tau_min: 0.1,
            tau_max: 1.5,
            tau_band: 0.2,
            task_weights: vec![1.0; n_experts],
            phases: PhaseSchedule::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |key: &str, reason: String| {
            Err(Error::Config {
                key: key.to_string(),
                reason,
            })
        };
        if self.n_experts == 0 {
            return fail("dcc.n_experts", "must be at least 1".into());
        }
        if !(self.momentum > 0.0 && self.momentum < 1.0) {
            return fail("dcc.momentum", format!("must lie in (0, 1), got {}", self.momentum));
        }
        if !(self.alpha > 0.0) {
            return fail("dcc.alpha", format!("must be positive, got {}", self.alpha));
        }
        if self.period == 0 {
            return fail("dcc.period", "must be at least 1".into());
        }
        if !(self.min_capacity >= 1.0) {
            return fail("dcc.min_capacity", format!("must be at least 1, got {}", self.min_capacity));
        }
        if !(self.base_capacity > 0.0) {
            return fail("dcc.base_capacity", format!("must be positive, got {}", self.base_capacity));
        }
        if !(self.tau_min > 0.0 && self.tau_min < self.tau_max) {
            return fail(
                "dcc.tau_min",
                format!("need 0 < tau_min < tau_max, got {} and {}", self.tau_min, self.tau_max),
            );
        }
        if !(self.eta >= 0.0) || !(self.tau_band >= 0.0) {
            return fail("dcc.eta", "eta and tau_band must be nonnegative".into());
        }
        if self.task_weights.len() != self.n_experts {
            return fail(
                "dcc.task_weights",
                format!("expected {} weights, found {}", self.n_experts, self.task_weights.len()),
            );
        }
        let total: Real = self.phases.fractions.iter().sum();
        if (total - 1.0).abs() > 1e-9 || self.phases.fractions.iter().any(|&f| f < 0.0) {
            return fail("dcc.phases.fractions", format!("must be nonnegative and sum to 1, got {total}"));
        }
        Ok(())
    }
}

/// Mutable scheduler state owned by the training loop.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DccState {
    pub capacities: Vec<Real>,
    pub u_avg: Vec<Real>,
    pub loads: Vec<usize>,
    pub tau: Real,
    /// Phase base temperature τ is perturbed around.
    pub tau_base: Real,
    /// Accumulated entropy adjustment, kept within `±tau_band`.
    pub tau_offset: Real,
    pub iteration: u64,
    pub phase: usize,
    /// Fallback assignments in the current batch.
    pub overflow: usize,
    /// Per-expert count of consecutive updates with `u_avg < 0.25 / n`.
    pub low_streak: Vec<usize>,
    /// Longest streak seen for any expert.
    pub max_low_streak: usize,
}

impl DccState {
    pub fn new(cfg: &DccConfig) -> Self {
        let n = cfg.n_experts;
        let tau = cfg.phases.tau_start.clamp(cfg.tau_min, cfg.tau_max);
        Self {
            capacities: vec![cfg.base_capacity.max(cfg.min_capacity); n],
            u_avg: vec![0.0; n],
            loads: vec![0; n],
            tau,
            tau_base: cfg.phases.tau_start,
            tau_offset: 0.0,
            iteration: 0,
            phase: 0,
            overflow: 0,
            low_streak: vec![0; n],
            max_low_streak: 0,
        }
    }

    pub fn n_experts(&self) -> usize {
        self.capacities.len()
    }

    pub fn reset_loads(&mut self) {
        self.loads.iter_mut().for_each(|l| *l = 0);
        self.overflow = 0;
    }

    /// EMA update `U_avg ← μ·U_avg + (1−μ)·L/B`.
    pub fn record_batch(&mut self, loads: &[usize], batch_size: usize, momentum: Real) -> Result<()> {
        if batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if loads.len() != self.u_avg.len() {
            return Err(Error::invalid(format!(
                "expected {} loads, found {}",
                self.u_avg.len(),
                loads.len()
            )));
        }
        for (u, &l) in self.u_avg.iter_mut().zip(loads) {
            let batch = l as Real / batch_size as Real;
            *u = momentum * *u + (1.0 - momentum) * batch;
        }
        Ok(())
    }

    /// Recomputes every capacity from `C_b`, floored at `C_min`.
    pub fn update_capacities(&mut self, cfg: &DccConfig) -> &[Real] {
        let n = cfg.n_experts as Real;
        for ((c, &u), &w) in self.capacities.iter_mut().zip(&self.u_avg).zip(&cfg.task_weights) {
            *c = (cfg.base_capacity * (1.0 + cfg.alpha * (w / n - u))).max(cfg.min_capacity);
        }
        &self.capacities
    }

    /// Adds `η·entropy(U_avg)` to the offset from the phase base and clips.
    pub fn update_temperature(&mut self, cfg: &DccConfig) -> Real {
        let h = entropy(&self.u_avg);
        self.tau_offset = (self.tau_offset + cfg.eta * h).clamp(-cfg.tau_band, cfg.tau_band);
        self.tau = (self.tau_base + self.tau_offset).clamp(cfg.tau_min, cfg.tau_max);
        self.tau
    }

    /// Sets the phase base temperature for `epoch` and re-applies the offset.
    pub fn set_epoch(&mut self, epoch: usize, total_epochs: usize, cfg: &DccConfig) {
        self.phase = cfg.phases.phase(epoch, total_epochs);
        self.tau_base = cfg.phases.temperature(epoch, total_epochs);
        self.tau = (self.tau_base + self.tau_offset).clamp(cfg.tau_min, cfg.tau_max);
    }

    /// End-of-iteration bookkeeping. On iterations divisible by the period
    /// this records the batch loads, updates capacities and temperature and
    /// returns true.
    pub fn end_iteration(&mut self, cfg: &DccConfig, batch_size: usize) -> Result<bool> {
        let due = self.iteration % cfg.period as u64 == 0;
        if due {
            let loads = self.loads.clone();
            self.record_batch(&loads, batch_size, cfg.momentum)?;
            self.update_capacities(cfg);
            self.update_temperature(cfg);
            self.track_starvation();
        }
        self.iteration += 1;
        Ok(due)
    }

    fn track_starvation(&mut self) {
        let floor = 0.25 / self.n_experts() as Real;
        for (streak, &u) in self.low_streak.iter_mut().zip(&self.u_avg) {
            *streak = if u < floor { *streak + 1 } else { 0 };
            self.max_low_streak = self.max_low_streak.max(*streak);
        }
    }

    /// True when some expert stayed below `0.25 / n` utilization for more
    /// than `limit` consecutive updates.
    pub fn starved(&self, limit: usize) -> bool {
        self.max_low_streak > limit
    }

    /// Checks `L_i ≤ ⌈C_i⌉ + overflow` for the current batch.
    pub fn within_capacity(&self) -> bool {
        self.loads
            .iter()
            .zip(&self.capacities)
            .all(|(&l, &c)| l <= c.ceil() as usize + self.overflow)
    }
}

/// Shannon entropy (nats) of `values` normalized to sum to one. A zero or
/// negative total gives zero.
pub fn entropy(values: &[Real]) -> Real {
    let total: Real = values.iter().map(|v| v.max(0.0)).sum();
    if !(total > 0.0) {
        return 0.0;
    }
    values
        .iter()
        .map(|&v| v.max(0.0) / total)
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.ln())
        .sum()
}

/// Writes one CSV row per DCC update:
/// `iteration,u_avg_0..,capacity_0..,tau,overflow`.
pub struct DccLog<W: Write> {
    writer: csv::Writer<W>,
}

impl<W: Write> DccLog<W> {
    pub fn new(inner: W, n_experts: usize) -> Result<Self> {
        let mut writer = csv::Writer::from_writer(inner);
        let mut header = vec!["iteration".to_string()];
        header.extend((0..n_experts).map(|i| format!("u_avg_{i}")));
        header.extend((0..n_experts).map(|i| format!("capacity_{i}")));
        header.push("tau".into());
        header.push("overflow".into());
        writer.write_record(&header)?;
        Ok(Self { writer })
    }

    /// Continues an existing log without repeating the header.
    pub fn resume(inner: W) -> Self {
        Self {
            writer: csv::Writer::from_writer(inner),
        }
    }

    pub fn record(&mut self, state: &DccState) -> Result<()> {
        let mut row = vec![state.iteration.to_string()];
        row.extend(state.u_avg.iter().map(|u| u.to_string()));
        row.extend(state.capacities.iter().map(|c| c.to_string()));
        row.push(state.tau.to_string());
        row.push(state.overflow.to_string());
        self.writer.write_record(&row)?;
        self.writer.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests;
