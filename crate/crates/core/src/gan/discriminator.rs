use rand::Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{Conv3dSpec, Linear, Norm3d, NormKind, ParamId, ParamStore, SpectralNorm};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Lower and upper clamp applied to discriminator outputs.
pub const D_EPS: Real = 1e-7;

#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorConfig {
    pub resolution: usize,
    pub channels: [usize; 3],
}

impl DiscriminatorConfig {
    pub fn from_model(model: &ModelConfig, resolution: usize) -> Self {
        Self {
            resolution,
            channels: model.discriminator_channels.map(|c| model.scaled(c)),
        }
    }
}

#[derive(Debug)]
struct SnConv {
    spec: Conv3dSpec,
    sn: SpectralNorm,
    bias: ParamId,
    norm: Option<Norm3d>,
}

/// Spectrally normalized stride-2 convolutions with instance norm and
/// LeakyReLU(0.2), then a linear layer and a sigmoid.
#[derive(Debug)]
pub struct Discriminator {
    pub config: DiscriminatorConfig,
    pub store: ParamStore,
    convs: Vec<SnConv>,
    out: Linear,
}

impl Discriminator {
    pub fn new<R: Rng + ?Sized>(config: DiscriminatorConfig, rng: &mut R) -> Result<Self> {
        if config.resolution % 8 != 0 || config.resolution < 16 {
            return Err(Error::invalid(format!(
                "discriminator resolution must be a multiple of 8 and at least 16 (instance norm needs more than one cell), got {}",
                config.resolution
            )));
        }
        let mut store = ParamStore::new();
        let [c1, c2, c3] = config.channels;
        let mut convs = Vec::new();
        for (i, (a, b)) in [(1, c1), (c1, c2), (c2, c3)].into_iter().enumerate() {
            let spec = Conv3dSpec::new(a, b, 4, 2, 1);
            let fan_in = (a * 64) as Real;
            let w = Tensor::randn(&[b, a, 4, 4, 4], (2.0 / fan_in).sqrt(), rng);
            let weight = store.add(format!("conv{i}.weight"), w, true);
            let sn = SpectralNorm::new(&mut store, &format!("conv{i}"), weight, rng);
            let bias = store.add(format!("conv{i}.bias"), Tensor::zeros(&[b]), true);
            let norm = (i > 0).then(|| Norm3d::new(&mut store, &format!("conv{i}.in"), NormKind::Instance, b));
            convs.push(SnConv { spec, sn, bias, norm });
        }
        let flat = c3 * (config.resolution / 8).pow(3);
        let out = Linear::new(&mut store, "out", flat, 1, rng);
        Ok(Self {
            config,
            store,
            convs,
            out,
        })
    }

    /// `x: [B, 1, R, R, R]` → `[B, 1]` in `[ε, 1−ε]`. Training mode advances
    /// the spectral-norm power iteration.
    pub fn forward<'t>(&mut self, tape: &'t Tape, x: Var<'t>, train: bool) -> Result<Var<'t>> {
        let r = self.config.resolution;
        let b = x.shape()[0];
        if x.shape() != [b, 1, r, r, r] {
            return Err(Error::ShapeMismatch {
                lhs: x.shape(),
                rhs: vec![b, 1, r, r, r],
                context: "discriminator input",
            });
        }
        let mut h = x;
        for layer in &self.convs {
            let w = layer.sn.forward(tape, &mut self.store, train)?;
            let bias = self.store.bind(tape, layer.bias);
            h = h.conv3d(w, Some(bias), layer.spec.stride, layer.spec.padding, layer.spec.dilation)?;
            if let Some(norm) = &layer.norm {
                h = norm.forward(tape, &mut self.store, h, train)?;
            }
            h = h.leaky_relu(0.2);
        }
        let flat = h.reshape(&[b, h.shape()[1..].iter().product()])?;
        Ok(self
            .out
            .forward(tape, &self.store, flat)?
            .sigmoid()
            .clamp(D_EPS, 1.0 - D_EPS))
    }

    /// Eval-mode scores without gradient tracking.
    pub fn score(&mut self, x: &Tensor) -> Result<Vec<Real>> {
        let was = self.store.is_frozen();
        self.store.set_frozen(true);
        let tape = Tape::new();
        let out = self.forward(&tape, tape.constant(x.clone()), false);
        self.store.set_frozen(was);
        Ok(out?.value().data().to_vec())
    }
}
