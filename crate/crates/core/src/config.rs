//! Run configuration: JSON schema, profiles, overrides and validation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::dcc::{DccConfig, PhaseSchedule};
use crate::error::{Error, Result};
use crate::metrics::EvalSettings;
use crate::tensor::Real;
use crate::voxel::OcclusionMode;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Generation,
    Completion,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RoutingMode {
    /// One expert per sample under capacity limits.
    Hard,
    /// Top-k probability-weighted mixture.
    Soft,
}

/// How encoder activations rejoin the decoder.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SkipMode {
    /// Channel concatenation.
    #[default]
    Concat,
    /// Elementwise sum; the input skip into the head stays concatenated.
    Add,
}

/// Which cells the geometric consistency loss compares.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GeomMask {
    /// Every cell not removed by the occlusion.
    Observed,
    /// Only the occupied cells of the partial input.
    Partial,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub count: usize,
    pub resolution: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_experts: usize,
    pub latent_dim: usize,
    /// Channels the latent is projected to before being broadcast over the grid.
    pub latent_channels: usize,
    /// Multiplier applied to every channel count below.
    pub width: Real,
    pub generator_channels: [usize; 3],
    pub dilations: Vec<usize>,
    pub discriminator_channels: [usize; 3],
    pub gate_hidden: [usize; 2],
    /// Feed pooled expert features to the gating network.
    pub expert_features: bool,
    pub skip: SkipMode,
}

impl ModelConfig {
    pub fn scaled(&self, c: usize) -> usize {
        ((c as Real * self.width).round() as usize).max(1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoutingConfig {
    pub k: usize,
    /// Choose k per sample from routing entropy within `[k_min, k_max]`.
    pub adaptive_k: bool,
    pub k_min: usize,
    pub k_max: usize,
    pub train_mode: RoutingMode,
    pub inference_mode: RoutingMode,
    pub renormalize: bool,
    /// Give the gating network its own soft-routing update each iteration.
    pub gate_update: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OcclusionConfig {
    pub ratio_min: Real,
    pub ratio_max: Real,
    pub modes: Vec<OcclusionMode>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_generator: Real,
    pub lr_discriminator: Real,
    pub lr_gate: Real,
    pub beta1: Real,
    pub beta2: Real,
    /// Discriminator updates per generator update.
    pub d_steps: usize,
    pub lambda_geom: Real,
    pub geom_mask: GeomMask,
    pub occlusion: OcclusionConfig,
    /// Checkpoint period in epochs (0 disables periodic checkpoints).
    pub checkpoint_every: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DccParams {
    /// `C_b`; when absent, `batch / n · capacity_factor`.
    pub base_capacity: Option<Real>,
    pub capacity_factor: Real,
    pub momentum: Real,
    pub alpha: Real,
    pub period: usize,
    pub min_capacity: Real,
    pub eta: Real,
    pub tau_min: Real,
    pub tau_max: Real,
    pub tau_band: Real,
    pub task_weights: Option<Vec<Real>>,
    pub phases: PhaseSchedule,
    /// Disables capacity limits (every sample takes its first candidate).
    pub enabled: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub points: usize,
    pub threshold: Real,
    pub seed: u64,
    pub occlusion_ratio: Real,
    pub occlusion_mode: OcclusionMode,
}

impl EvalConfig {
    pub fn settings(&self) -> EvalSettings {
        EvalSettings {
            points: self.points,
            threshold: self.threshold,
            seed: self.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub data_dir: PathBuf,
    pub run_dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub profile: String,
    pub seed: u64,
    pub task: Task,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub routing: RoutingConfig,
    pub train: TrainConfig,
    pub dcc: DccParams,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            count: 200,
            resolution: 16,
            seed: 0,
        }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_experts: 4,
            latent_dim: 64,
            latent_channels: 8,
            width: 0.125,
            generator_channels: [64, 128, 256],
            dilations: vec![2, 4, 8],
            discriminator_channels: [64, 128, 256],
            gate_hidden: [512, 256],
            expert_features: true,
            skip: SkipMode::Concat,
        }
    }
}

impl Default for RoutingConfig {
    fn default() -> Self {
        Self {
            k: 2,
            adaptive_k: false,
            k_min: 1,
            k_max: 2,
            train_mode: RoutingMode::Hard,
            inference_mode: RoutingMode::Soft,
            renormalize: false,
            gate_update: true,
        }
    }
}

impl Default for OcclusionConfig {
    fn default() -> Self {
        Self {
            ratio_min: 0.1,
            ratio_max: 0.9,
            modes: vec![OcclusionMode::RandomCells],
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 8,
            lr_generator: 2e-3,
            lr_discriminator: 2e-4,
            lr_gate: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            d_steps: 1,
            lambda_geom: 10.0,
            geom_mask: GeomMask::Partial,
            occlusion: OcclusionConfig::default(),
            checkpoint_every: 10,
        }
    }
}

impl Default for DccParams {
    fn default() -> Self {
        Self {
            base_capacity: None,
            capacity_factor: 1.2,
            momentum: 0.95,
            alpha: 0.1,
            period: 5,
            min_capacity: 1.0,
            eta: 0.01,
            tau_min: 0.1,
            tau_max: 1.5,
            tau_band: 0.2,
            task_weights: None,
            phases: PhaseSchedule::default(),
            enabled: true,
        }
    }
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            points: 1024,
            threshold: 0.5,
            seed: 0,
            occlusion_ratio: 0.5,
            occlusion_mode: OcclusionMode::RandomCells,
        }
    }
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("data"),
            run_dir: PathBuf::from("runs/default"),
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

fn config_err(key: &str, reason: impl Into<String>) -> Error {
    Error::Config {
        key: key.to_string(),
        reason: reason.into(),
    }
}

impl RunConfig {
    /// Small CPU profile: 16³ grids, four experts, batch 8, 30 epochs.
    pub fn desk() -> Self {
        Self {
            profile: "desk".into(),
            seed: 0,
            task: Task::Completion,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            routing: RoutingConfig::default(),
            train: TrainConfig::default(),
            dcc: DccParams::default(),
            eval: EvalConfig::default(),
            paths: PathsConfig::default(),
        }
    }

    /// Full-size hyperparameters (64³, batch 64, 500 epochs, full widths).
    /// Far beyond what a CPU run finishes.
    pub fn paper() -> Self {
        let mut c = Self::desk();
        c.profile = "paper".into();
        c.data.resolution = 64;
        c.data.count = 5000;
        c.model.n_experts = 8;
        c.model.latent_channels = 64;
        c.model.width = 1.0;
        c.train.epochs = 500;
        c.train.batch_size = 64;
        c.train.lr_generator = 2e-4;
        c.train.occlusion.ratio_min = 0.7;
        c.train.occlusion.ratio_max = 0.7;
        c
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            other => Err(config_err("profile", format!("unknown profile `{other}` (expected desk or paper)"))),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text)?;
        let base = match value.get("profile").and_then(Value::as_str) {
            Some(p) => Self::profile(p)?,
            None => Self::desk(),
        };
        let mut merged = serde_json::to_value(&base)?;
        merge(&mut merged, value);
        serde_json::from_value(merged).map_err(|e| config_err("<root>", e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingInput(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Applies `key.path=value`; the value is parsed as JSON, falling back
    /// to a plain string.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| config_err(assignment, "override must look like key=value"))?;
        let key = key.trim();
        let parsed: Value = serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.trim().into()));
        let mut root = serde_json::to_value(&*self)?;
        let mut slot = &mut root;
        for part in key.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|o| o.get_mut(part))
                .ok_or_else(|| config_err(key, "no such setting"))?;
        }
        *slot = parsed;
        *self = serde_json::from_value(root).map_err(|e| config_err(key, e.to_string()))?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        let r = self.data.resolution;
        if !(16..=64).contains(&r) || r % 8 != 0 {
            return Err(config_err("data.resolution", format!("must be a multiple of 8 in 16..=64, got {r}")));
        }
        if self.data.count < 5 {
            return Err(config_err("data.count", "need at least 5 shapes"));
        }
        if m.n_experts == 0 {
            return Err(config_err("model.n_experts", "must be at least 1"));
        }
        if m.latent_dim == 0 || m.latent_channels == 0 {
            return Err(config_err("model.latent_dim", "latent sizes must be positive"));
        }
        if !(m.width > 0.0) {
            return Err(config_err("model.width", format!("must be positive, got {}", m.width)));
        }
        if m.dilations.iter().any(|&d| d == 0) {
            return Err(config_err("model.dilations", "dilation rates must be positive"));
        }
        let rt = &self.routing;
        if rt.k == 0 || rt.k > m.n_experts {
            return Err(config_err("routing.k", format!("must lie in 1..={}, got {}", m.n_experts, rt.k)));
        }
        if rt.adaptive_k && (rt.k_min == 0 || rt.k_min > rt.k_max || rt.k_max > m.n_experts) {
            return Err(config_err(
                "routing.k_min",
                format!("need 1 ≤ k_min ≤ k_max ≤ {}", m.n_experts),
            ));
        }
        let t = &self.train;
        if t.epochs == 0 {
            return Err(config_err("train.epochs", "must be at least 1"));
        }
        if t.batch_size == 0 {
            return Err(config_err("train.batch_size", "must be at least 1"));
        }
        for (key, v) in [
            ("train.lr_generator", t.lr_generator),
            ("train.lr_discriminator", t.lr_discriminator),
            ("train.lr_gate", t.lr_gate),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(config_err(key, format!("must be positive, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) {
            return Err(config_err("train.beta1", "Adam betas must lie in [0, 1)"));
        }
        if t.d_steps == 0 {
            return Err(config_err("train.d_steps", "must be at least 1"));
        }
        if !(t.lambda_geom >= 0.0) {
            return Err(config_err("train.lambda_geom", "must be nonnegative"));
        }
        let o = &t.occlusion;
        if !(o.ratio_min > 0.0 && o.ratio_min <= o.ratio_max && o.ratio_max <= 0.95) {
            return Err(config_err(
                "train.occlusion.ratio_min",
                format!("need 0 < ratio_min ≤ ratio_max ≤ 0.95, got {} and {}", o.ratio_min, o.ratio_max),
            ));
        }
        if o.modes.is_empty() {
            return Err(config_err("train.occlusion.modes", "need at least one occlusion mode"));
        }
        if self.train_split_len() < t.batch_size {
            return Err(config_err(
                "train.batch_size",
                format!("larger than the {} training shapes", self.train_split_len()),
            ));
        }
        let e = &self.eval;
        if e.points == 0 {
            return Err(config_err("eval.points", "must be positive"));
        }
        if !(e.threshold > 0.0 && e.threshold < 1.0) {
            return Err(config_err("eval.threshold", "must lie in (0, 1)"));
        }
        if !(e.occlusion_ratio > 0.0 && e.occlusion_ratio <= 0.95) {
            return Err(config_err("eval.occlusion_ratio", "must lie in (0, 0.95]"));
        }
        self.dcc_config().validate()
    }

    pub fn train_split_len(&self) -> usize {
        self.data.count * 4 / 5
    }

    pub fn dcc_config(&self) -> DccConfig {
        let n = self.model.n_experts;
        let b = self.train.batch_size;
        let p = &self.dcc;
        let mut c = DccConfig::for_batch(n, b);
        c.base_capacity = p
            .base_capacity
            .unwrap_or(b as Real / n as Real * p.capacity_factor);
        if !p.enabled {
            c.base_capacity = (b * 10) as Real;
            c.min_capacity = (b * 10) as Real;
        } else {
            c.min_capacity = p.min_capacity;
        }
        c.momentum = p.momentum;
        c.alpha = p.alpha;
        c.period = p.period;
        c.eta = p.eta;
        c.tau_min = p.tau_min;
        c.tau_max = p.tau_max;
        c.tau_band = p.tau_band;
        c.task_weights = p.task_weights.clone().unwrap_or_else(|| vec![1.0; n]);
        c.phases = p.phases.clone();
        c
    }

    /// SHA-256 over everything that shapes training (all but `eval` and `paths`).
    pub fn training_hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(o) = v.as_object_mut() {
            o.remove("eval");
            o.remove("paths");
        }
        let digest = Sha256::digest(v.to_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_validate() {
        RunConfig::desk().validate().unwrap();
        RunConfig::paper().validate().unwrap();
        let c = RunConfig::desk();
        assert_eq!(c.model.scaled(64), 8);
        assert_eq!(c.model.scaled(512), 64);
        assert!((c.dcc_config().base_capacity - 2.4).abs() < 1e-12);
        assert!((RunConfig::paper().dcc_config().base_capacity - 9.6).abs() < 1e-12);
    }

    #[test]
    fn overrides_and_json_round_trip() {
        let mut c = RunConfig::desk();
        c.set("model.n_experts=8").unwrap();
        c.set("train.occlusion.modes=[\"half-space\"]").unwrap();
        c.set("profile=custom").unwrap();
        assert_eq!(c.model.n_experts, 8);
        assert_eq!(c.train.occlusion.modes, vec![OcclusionMode::HalfSpace]);
        let back = RunConfig::from_json(&c.to_json()).unwrap_err();
        // unknown profile names are rejected when re-read
        assert!(matches!(back, Error::Config { .. }));
        c.profile = "desk".into();
        assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);

        let err = c.set("model.bogus=1").unwrap_err();
        assert!(err.to_string().contains("model.bogus"), "{err}");
        let err = c.set("train.epochs=\"many\"").unwrap_err();
        assert!(err.to_string().contains("train.epochs"), "{err}");
    }

    #[test]
    fn partial_json_fills_defaults() {
        let c = RunConfig::from_json(r#"{"profile": "paper", "train": {"epochs": 3}}"#).unwrap();
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.train.batch_size, 64);
        assert!(RunConfig::from_json(r#"{"tain": {}}"#).is_err());
    }

    #[test]
    fn validation_names_the_key() {
        for (set, key) in [
            ("routing.k=9", "routing.k"),
            ("data.resolution=12", "data.resolution"),
            ("dcc.momentum=1.5", "dcc.momentum"),
            ("train.occlusion.ratio_max=0.99", "train.occlusion.ratio_min"),
            ("train.batch_size=500", "train.batch_size"),
        ] {
            let mut c = RunConfig::desk();
            c.set(set).unwrap();
            match c.validate() {
                Err(Error::Config { key: k, .. }) => assert_eq!(k, key),
                other => panic!("{set}: {other:?}"),
            }
        }
    }

    #[test]
    fn hash_ignores_eval_and_paths() {
        let a = RunConfig::desk();
        let mut b = a.clone();
        b.eval.points = 17;
        b.paths.run_dir = "elsewhere".into();
        assert_eq!(a.training_hash(), b.training_hash());
        b.seed = 1;
        assert_ne!(a.training_hash(), b.training_hash());
    }
}
