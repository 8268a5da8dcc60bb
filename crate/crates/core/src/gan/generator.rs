use rand::Rng;

use crate::config::{ModelConfig, SkipMode};
use crate::error::{Error, Result};
use crate::nn::{Conv3d, Conv3dSpec, ConvTranspose3d, Linear, Norm3d, NormKind, ParamStore, ResidualBlock};
use crate::tensor::{Real, Tape, Tensor, Var};
use crate::voxel::VoxelGrid;

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub resolution: usize,
    pub latent_dim: usize,
    pub latent_channels: usize,
    pub channels: [usize; 3],
    pub dilations: Vec<usize>,
    /// Takes the partial shape as an extra input channel.
    pub completion: bool,
    pub skip: SkipMode,
}

impl GeneratorConfig {
    pub fn from_model(model: &ModelConfig, resolution: usize, completion: bool) -> Self {
        Self {
            resolution,
            latent_dim: model.latent_dim,
            latent_channels: model.latent_channels,
            channels: model.generator_channels.map(|c| model.scaled(c)),
            dilations: model.dilations.clone(),
            completion,
            skip: model.skip,
        }
    }

    pub fn input_channels(&self) -> usize {
        self.latent_channels + self.completion as usize
    }

    /// Width of the pooled feature tap.
    pub fn feature_dim(&self) -> usize {
        self.channels[0]
    }
}

/// How far a generator forward pass runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ForwardMode {
    Full,
    /// Stops after the feature tap.
    Partial,
}

pub struct GeneratorOutput<'t> {
    /// `[B, 1, R, R, R]` occupancy in `[0, 1]`; absent for partial passes.
    pub h: Option<Var<'t>>,
    /// `[B, C]` spatial mean of the second transposed convolution's output.
    pub f: Var<'t>,
}

/// Encoder (three stride-2 convolutions), dilated residual bottleneck, and
/// decoder (three transposed convolutions with skip connections).
#[derive(Debug)]
pub struct ExpertGenerator {
    pub id: usize,
    pub config: GeneratorConfig,
    pub store: ParamStore,
    latent: Linear,
    down: Vec<(Conv3d, Norm3d)>,
    blocks: Vec<ResidualBlock>,
    up: Vec<(ConvTranspose3d, Norm3d)>,
    head: Conv3d,
}

impl ExpertGenerator {
    pub fn new<R: Rng + ?Sized>(id: usize, config: GeneratorConfig, rng: &mut R) -> Result<Self> {
        if config.resolution % 8 != 0 || config.resolution < 8 {
            return Err(Error::invalid(format!(
                "generator resolution must be a positive multiple of 8, got {}",
                config.resolution
            )));
        }
        let mut store = ParamStore::new();
        let s = &mut store;
        let [c1, c2, c3] = config.channels;
        let cin = config.input_channels();
        let latent = Linear::new(s, "latent", config.latent_dim, config.latent_channels, rng);
        let mut down = Vec::new();
        for (i, (a, b)) in [(cin, c1), (c1, c2), (c2, c3)].into_iter().enumerate() {
            let conv = Conv3d::new(s, &format!("down{i}"), Conv3dSpec::new(a, b, 4, 2, 1), rng);
            down.push((conv, Norm3d::new(s, &format!("down{i}.bn"), NormKind::Batch, b)));
        }
        let blocks = config
            .dilations
            .iter()
            .enumerate()
            .map(|(i, &d)| ResidualBlock::new(s, &format!("res{i}"), c3, d, NormKind::Batch, rng))
            .collect();
        let mut up = Vec::new();
        let joined = |c: usize| if config.skip == SkipMode::Concat { 2 * c } else { c };
        for (i, (a, b)) in [(c3, c2), (joined(c2), c1), (joined(c1), c1)].into_iter().enumerate() {
            let conv = ConvTranspose3d::new(s, &format!("up{i}"), Conv3dSpec::new(a, b, 4, 2, 1), rng);
            up.push((conv, Norm3d::new(s, &format!("up{i}.bn"), NormKind::Batch, b)));
        }
        let head = Conv3d::new(s, "head", Conv3dSpec::new(c1 + cin, 1, 3, 1, 1), rng);
        Ok(Self {
            id,
            config,
            store,
            latent,
            down,
            blocks,
            up,
            head,
        })
    }

    /// `z: [B, d]`; `x_p: [B, 1, R, R, R]` in completion mode.
    pub fn forward<'t>(
        &mut self,
        tape: &'t Tape,
        z: Var<'t>,
        x_p: Option<Var<'t>>,
        train: bool,
        mode: ForwardMode,
    ) -> Result<GeneratorOutput<'t>> {
        let c = &self.config;
        let zs = z.shape();
        if zs.len() != 2 || zs[1] != c.latent_dim {
            return Err(Error::ShapeMismatch {
                lhs: zs,
                rhs: vec![0, c.latent_dim],
                context: "generator latent",
            });
        }
        let b = zs[0];
        let r = c.resolution;
        let input = {
            let proj = self.latent.forward(tape, &self.store, z)?;
            let ones = tape.constant(Tensor::ones(&[1, 1, r, r, r]));
            let volume = proj.reshape(&[b, c.latent_channels, 1, 1, 1])?.mul(ones)?;
            match (x_p, c.completion) {
                (Some(xp), true) => {
                    if xp.shape() != [b, 1, r, r, r] {
                        return Err(Error::ShapeMismatch {
                            lhs: xp.shape(),
                            rhs: vec![b, 1, r, r, r],
                            context: "generator partial input",
                        });
                    }
                    Var::concat(&[volume, xp], 1)?
                }
                (None, false) => volume,
                (Some(_), false) => return Err(Error::invalid("generation expert given a partial input")),
                (None, true) => return Err(Error::invalid("completion expert needs a partial input")),
            }
        };
        let store = &mut self.store;
        let mut skips = Vec::with_capacity(3);
        let mut h = input;
        for (conv, norm) in &self.down {
            h = conv.forward(tape, store, h)?;
            h = norm.forward(tape, store, h, train)?.relu();
            skips.push(h);
        }
        for block in &self.blocks {
            h = block.forward(tape, store, h, train)?;
        }
        let mut f = None;
        for (i, (conv, norm)) in self.up.iter().enumerate() {
            h = conv.forward(tape, store, h)?;
            h = norm.forward(tape, store, h, train)?.relu();
            if i == 1 {
                f = Some(h.spatial_mean()?);
                if mode == ForwardMode::Partial {
                    break;
                }
            }
            h = match (i, self.config.skip) {
                (2, _) => Var::concat(&[h, input], 1)?,
                (_, SkipMode::Concat) => Var::concat(&[h, skips[1 - i]], 1)?,
                (_, SkipMode::Add) => h.add(skips[1 - i])?,
            };
        }
        let f = f.expect("decoder has three stages");
        if mode == ForwardMode::Partial {
            return Ok(GeneratorOutput { h: None, f });
        }
        let h = self.head.forward(tape, store, h)?.sigmoid();
        Ok(GeneratorOutput { h: Some(h), f })
    }

    /// Eval-mode pass without gradient tracking.
    pub fn infer(&mut self, z: &Tensor, x_p: Option<&Tensor>, mode: ForwardMode) -> Result<(Option<Tensor>, Tensor)> {
        let was = self.store.is_frozen();
        self.store.set_frozen(true);
        let tape = Tape::new();
        let out = self.forward(&tape, tape.constant(z.clone()), x_p.map(|x| tape.constant(x.clone())), false, mode);
        self.store.set_frozen(was);
        let out = out?;
        Ok((out.h.map(|h| (*h.value()).clone()), (*out.f.value()).clone()))
    }
}

/// Single-sample eval-mode forward returning the occupancy grid and the
/// feature tap.
pub fn generator_forward(g: &mut ExpertGenerator, z: &[Real], x_p: Option<&VoxelGrid>) -> Result<(VoxelGrid, Tensor)> {
    let z = Tensor::new(vec![1, z.len()], z.to_vec())?;
    let xp = x_p.map(|x| x.to_tensor());
    let (h, f) = g.infer(&z, xp.as_ref(), ForwardMode::Full)?;
    let grid = VoxelGrid::from_slice_clamped(g.config.resolution, h.expect("full pass").data())?;
    Ok((grid, f))
}
