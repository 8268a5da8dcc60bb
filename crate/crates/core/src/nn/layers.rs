use rand::Rng;

use super::{ParamId, ParamStore};
use crate::error::Result;
use crate::tensor::{Real, Tape, Tensor, Var};

/// Fully connected layer, `y = x·W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    /// Xavier-uniform weights, zero bias.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_features: usize,
        out_features: usize,
        rng: &mut R,
    ) -> Self {
        let a = (6.0 / (in_features + out_features) as Real).sqrt();
        let w = Tensor::uniform(&[in_features, out_features], -a, a, rng);
        Self {
            weight: store.add(format!("{name}.weight"), w, true),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[out_features]), true),
            in_features,
            out_features,
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Result<Var<'t>> {
        x.matmul(store.bind(tape, self.weight))?
            .add(store.bind(tape, self.bias))
    }

    pub fn zero_init(&self, store: &mut ParamStore) {
        store.get_mut(self.weight).data_mut().fill(0.0);
        store.get_mut(self.bias).data_mut().fill(0.0);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv3dSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub bias: bool,
}

impl Conv3dSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            dilation: 1,
            bias: true,
        }
    }

    pub fn dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }

    pub fn no_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    /// Spatial output extent of a forward convolution over `input`.
    pub fn output_size(&self, input: usize) -> Option<usize> {
        let reach = self.dilation * (self.kernel - 1) + 1;
        let span = input + 2 * self.padding;
        (span >= reach).then(|| (span - reach) / self.stride + 1)
    }

    /// Spatial output extent of a transposed convolution over `input`.
    pub fn transposed_output_size(&self, input: usize) -> usize {
        (input - 1) * self.stride + self.dilation * (self.kernel - 1) + 1 - 2 * self.padding
    }
}

#[derive(Clone, Debug)]
pub struct Conv3d {
    pub spec: Conv3dSpec,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Conv3d {
    /// Kaiming-normal weights (fan-in), zero bias.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, spec: Conv3dSpec, rng: &mut R) -> Self {
        let k = spec.kernel;
        let fan_in = spec.in_channels * k * k * k;
        let std = (2.0 / fan_in as Real).sqrt();
        let w = Tensor::randn(&[spec.out_channels, spec.in_channels, k, k, k], std, rng);
        let weight = store.add(format!("{name}.weight"), w, true);
        let bias = spec
            .bias
            .then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[spec.out_channels]), true));
        Self { spec, weight, bias }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Result<Var<'t>> {
        self.forward_with(x, store.bind(tape, self.weight), self.bias.map(|b| store.bind(tape, b)))
    }

    /// Forward pass with an externally supplied (e.g. spectrally
    /// normalized) weight.
    pub fn forward_with<'t>(&self, x: Var<'t>, weight: Var<'t>, bias: Option<Var<'t>>) -> Result<Var<'t>> {
        x.conv3d(weight, bias, self.spec.stride, self.spec.padding, self.spec.dilation)
    }

    pub fn zero_init(&self, store: &mut ParamStore) {
        store.get_mut(self.weight).data_mut().fill(0.0);
        if let Some(b) = self.bias {
            store.get_mut(b).data_mut().fill(0.0);
        }
    }
}

/// Transposed convolution; weight layout `[in, out, k, k, k]`.
#[derive(Clone, Debug)]
pub struct ConvTranspose3d {
    pub spec: Conv3dSpec,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl ConvTranspose3d {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, spec: Conv3dSpec, rng: &mut R) -> Self {
        let k = spec.kernel;
        // Each output position sees about in·k³/stride³ inputs.
        let fan_in = (spec.in_channels * k * k * k / spec.stride.pow(3)).max(1);
        let std = (2.0 / fan_in as Real).sqrt();
        let w = Tensor::randn(&[spec.in_channels, spec.out_channels, k, k, k], std, rng);
        let weight = store.add(format!("{name}.weight"), w, true);
        let bias = spec
            .bias
            .then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[spec.out_channels]), true));
        Self { spec, weight, bias }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Result<Var<'t>> {
        x.conv_transpose3d(
            store.bind(tape, self.weight),
            self.bias.map(|b| store.bind(tape, b)),
            self.spec.stride,
            self.spec.padding,
            self.spec.dilation,
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormKind {
    Batch,
    Instance,
}

/// BatchNorm3d / InstanceNorm3d with affine scale and shift.
#[derive(Clone, Debug)]
pub struct Norm3d {
    pub kind: NormKind,
    pub num_features: usize,
    pub eps: Real,
    pub momentum: Real,
    pub scale: ParamId,
    pub shift: ParamId,
    running_mean: Option<ParamId>,
    running_var: Option<ParamId>,
}

impl Norm3d {
    pub fn new(store: &mut ParamStore, name: &str, kind: NormKind, num_features: usize) -> Self {
        let c = num_features;
        let scale = store.add(format!("{name}.scale"), Tensor::ones(&[c, 1, 1, 1]), true);
        let shift = store.add(format!("{name}.shift"), Tensor::zeros(&[c, 1, 1, 1]), true);
        let (running_mean, running_var) = match kind {
            NormKind::Batch => (
                Some(store.add(format!("{name}.running_mean"), Tensor::zeros(&[c, 1, 1, 1]), false)),
                Some(store.add(format!("{name}.running_var"), Tensor::ones(&[c, 1, 1, 1]), false)),
            ),
            NormKind::Instance => (None, None),
        };
        Self {
            kind,
            num_features,
            eps: 1e-5,
            momentum: 0.1,
            scale,
            shift,
            running_mean,
            running_var,
        }
    }

    /// Training mode uses batch (or instance) statistics and, for batch
    /// norm, updates the running estimates. Eval-mode batch norm is the
    /// fixed affine map given by the running estimates.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        store: &mut ParamStore,
        x: Var<'t>,
        train: bool,
    ) -> Result<Var<'t>> {
        let normalized = match (self.kind, train) {
            (NormKind::Instance, _) => x.normalize(true, self.eps)?.0,
            (NormKind::Batch, true) => {
                let (xhat, mean, var) = x.normalize(false, self.eps)?;
                let shape = x.shape();
                let n = (shape[0] * shape[2..].iter().product::<usize>()) as Real;
                let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
                let m = self.momentum;
                let rm = store.get_mut(self.running_mean.unwrap()).data_mut();
                rm.iter_mut().zip(&mean).for_each(|(r, v)| *r = (1.0 - m) * *r + m * v);
                let rv = store.get_mut(self.running_var.unwrap()).data_mut();
                rv.iter_mut().zip(&var).for_each(|(r, v)| *r = (1.0 - m) * *r + m * v * unbias);
                xhat
            }
            (NormKind::Batch, false) => {
                let rm = store.get(self.running_mean.unwrap()).clone();
                let mut inv = store.get(self.running_var.unwrap()).clone();
                inv.data_mut().iter_mut().for_each(|v| *v = 1.0 / (*v + self.eps).sqrt());
                x.sub(tape.constant(rm))?.mul(tape.constant(inv))?
            }
        };
        normalized
            .mul(store.bind(tape, self.scale))?
            .add(store.bind(tape, self.shift))
    }
}

/// `x + relu(norm(conv(x)))` with a size-preserving (optionally dilated)
/// convolution.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub conv: Conv3d,
    pub norm: Norm3d,
}

impl ResidualBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        dilation: usize,
        norm: NormKind,
        rng: &mut R,
    ) -> Self {
        let spec = Conv3dSpec::new(channels, channels, 3, 1, dilation).dilation(dilation);
        Self {
            conv: Conv3d::new(store, &format!("{name}.conv"), spec, rng),
            norm: Norm3d::new(store, &format!("{name}.norm"), norm, channels),
        }
    }

    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        store: &mut ParamStore,
        x: Var<'t>,
        train: bool,
    ) -> Result<Var<'t>> {
        let h = self.conv.forward(tape, store, x)?;
        let h = self.norm.forward(tape, store, h, train)?.relu();
        x.add(h)
    }

    /// Zeroes the residual branch so the block starts as the identity.
    pub fn zero_init(&self, store: &mut ParamStore) {
        self.conv.zero_init(store);
        store.get_mut(self.norm.shift).data_mut().fill(0.0);
    }
}
