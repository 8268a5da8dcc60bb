use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{MoeModel, Optimizers, Trainer};
use crate::config::RunConfig;
use crate::dcc::DccState;
use crate::error::{Error, Result};
use crate::nn::{Adam, ParamStore};
use crate::tensor::{Real, Tensor};
use crate::voxel::VoxelGrid;

const MAGIC: &[u8; 4] = b"MCKP";
const VERSION: u32 = 1;
const DTYPE_F64: u8 = 0;
const DTYPE_F32: u8 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct RngState {
    seed: String,
    stream: u64,
    word_pos: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub config: RunConfig,
    pub training_hash: String,
    pub epoch: usize,
    pub batch_index: usize,
    pub dcc: DccState,
    rng: RngState,
    /// Adam step counts: experts, then discriminator, then gate.
    pub adam_steps: Vec<u64>,
}

/// Everything needed to resume training exactly.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub tensors: Vec<(String, Tensor)>,
}

fn stores(model: &MoeModel) -> Vec<(String, &ParamStore)> {
    let mut out: Vec<_> = model
        .experts
        .iter()
        .enumerate()
        .map(|(i, e)| (format!("expert{i}"), &e.store))
        .collect();
    out.push(("discriminator".into(), &model.discriminator.store));
    out.push(("gate".into(), &model.gate.store));
    out
}

fn adams(optim: &Optimizers) -> Vec<&Adam> {
    optim.experts.iter().chain([&optim.discriminator, &optim.gate]).collect()
}

impl Checkpoint {
    pub fn from_trainer(t: &Trainer) -> Self {
        let mut tensors = Vec::new();
        for (prefix, store) in stores(&t.model) {
            for (name, tensor) in store.iter() {
                tensors.push((format!("{prefix}/{name}"), tensor.clone().with_requires_grad(false)));
            }
        }
        let prefixes = stores(&t.model).into_iter().map(|(p, _)| p).collect::<Vec<_>>();
        let mut adam_steps = Vec::new();
        for (prefix, adam) in prefixes.iter().zip(adams(&t.optim)) {
            adam_steps.push(adam.steps());
            let (m, v) = adam.moments();
            for (kind, buffers) in [("m", m), ("v", v)] {
                for (j, buf) in buffers.iter().enumerate() {
                    tensors.push((format!("adam/{prefix}/{kind}/{j}"), Tensor::from_slice(buf)));
                }
            }
        }
        let seed = t.rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
        Self {
            manifest: Manifest {
                config: t.model.config.clone(),
                training_hash: t.model.config.training_hash(),
                epoch: t.epoch,
                batch_index: t.batch_index,
                dcc: t.model.dcc.clone(),
                rng: RngState {
                    seed,
                    stream: t.rng.get_stream(),
                    word_pos: t.rng.get_word_pos().to_string(),
                },
                adam_steps,
            },
            tensors,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = serde_json::to_vec(&self.manifest)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        let dtype = if size_of::<Real>() == 8 { DTYPE_F64 } else { DTYPE_F32 };
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(dtype);
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not a checkpoint (expected MCKP magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let len = r.u64()? as usize;
        let manifest: Manifest = serde_json::from_slice(r.take(len)?)?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let dtype = r.take(1)?[0];
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let data: Vec<Real> = match dtype {
                DTYPE_F64 => r
                    .take(numel * 8)?
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()) as Real)
                    .collect(),
                DTYPE_F32 => r
                    .take(numel * 4)?
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as Real)
                    .collect(),
                other => return Err(Error::Format(format!("unknown dtype tag {other} for `{name}`"))),
            };
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { manifest, tensors })
    }

    fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor `{name}`")))
    }

    /// Rebuilds the model with the saved weights and routing state.
    pub fn into_model(&self) -> Result<MoeModel> {
        let config = &self.manifest.config;
        if config.training_hash() != self.manifest.training_hash {
            return Err(Error::Format("config does not match its recorded hash".into()));
        }
        let mut model = MoeModel::new(config, &mut ChaCha8Rng::seed_from_u64(config.seed))?;
        let mut slots: Vec<(String, &mut ParamStore)> = model
            .experts
            .iter_mut()
            .enumerate()
            .map(|(i, e)| (format!("expert{i}"), &mut e.store))
            .collect();
        slots.push(("discriminator".into(), &mut model.discriminator.store));
        slots.push(("gate".into(), &mut model.gate.store));
        for (prefix, store) in slots {
            let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
            for name in names {
                store.load(&name, self.tensor(&format!("{prefix}/{name}"))?.data())?;
            }
        }
        model.dcc = self.manifest.dcc.clone();
        if model.dcc.n_experts() != model.n_experts() {
            return Err(Error::Format("routing state does not match the expert count".into()));
        }
        Ok(model)
    }

    /// Restores a trainer positioned exactly where the checkpoint was taken.
    pub fn into_trainer(&self, data: Vec<VoxelGrid>) -> Result<Trainer> {
        let model = self.into_model()?;
        let mut t = Trainer::with_model(model, data)?;
        let prefixes: Vec<String> = stores(&t.model).into_iter().map(|(p, _)| p).collect();
        let sizes: Vec<usize> = stores(&t.model).iter().map(|(_, s)| s.len()).collect();
        let steps = &self.manifest.adam_steps;
        if steps.len() != prefixes.len() {
            return Err(Error::Format("optimizer state does not match the model".into()));
        }
        let mut adams: Vec<&mut Adam> = t.optim.experts.iter_mut().collect();
        adams.push(&mut t.optim.discriminator);
        adams.push(&mut t.optim.gate);
        for (((prefix, adam), &step), &size) in prefixes.iter().zip(adams).zip(steps).zip(&sizes) {
            if step == 0 {
                continue;
            }
            let load = |kind: &str| -> Result<Vec<Vec<Real>>> {
                (0..size)
                    .map(|j| Ok(self.tensor(&format!("adam/{prefix}/{kind}/{j}"))?.data().to_vec()))
                    .collect()
            };
            adam.restore(step, load("m")?, load("v")?);
        }
        t.epoch = self.manifest.epoch;
        t.batch_index = self.manifest.batch_index;
        let rng = &self.manifest.rng;
        let mut seed = [0u8; 32];
        if rng.seed.len() != 64 {
            return Err(Error::Format("bad RNG seed".into()));
        }
        for (i, s) in seed.iter_mut().enumerate() {
            *s = u8::from_str_radix(&rng.seed[2 * i..2 * i + 2], 16)
                .map_err(|_| Error::Format("bad RNG seed".into()))?;
        }
        let word_pos: u128 = rng.word_pos.parse().map_err(|_| Error::Format("bad RNG position".into()))?;
        t.rng = ChaCha8Rng::from_seed(seed);
        t.rng.set_stream(rng.stream);
        t.rng.set_word_pos(word_pos);
        Ok(t)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(Error::Truncated {
            expected: self.pos.saturating_add(n),
            found: self.bytes.len(),
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn save_checkpoint(trainer: &Trainer, path: impl AsRef<Path>) -> Result<()> {
    let bytes = Checkpoint::from_trainer(trainer).to_bytes()?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingInput(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    Checkpoint::from_bytes(&bytes)
}
