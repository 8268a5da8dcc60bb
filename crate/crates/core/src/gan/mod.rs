//! Expert generators, discriminator, losses, the MoE model, training and
//! checkpoints.

mod checkpoint;
mod discriminator;
mod generator;
mod loss;
mod model;
mod trainer;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use discriminator::{Discriminator, DiscriminatorConfig, D_EPS};
pub use generator::{generator_forward, ExpertGenerator, ForwardMode, GeneratorConfig, GeneratorOutput};
pub use loss::{
    adversarial_from_scores, adversarial_losses, discriminator_loss, generator_loss, geometric_consistency,
    geometric_consistency_loss, LossReport,
};
pub use model::{Inference, MoeModel};
pub use trainer::{Batch, LossSummary, Optimizers, StepReport, Trainer};

use crate::error::Result;
use crate::tensor::Tensor;

/// Copies the given leading-axis rows of `t`.
pub(crate) fn rows_of(t: &Tensor, rows: &[usize]) -> Result<Tensor> {
    let b = t.shape()[0];
    let per = t.numel() / b.max(1);
    let mut data = Vec::with_capacity(rows.len() * per);
    for &r in rows {
        data.extend_from_slice(&t.data()[r * per..(r + 1) * per]);
    }
    let mut shape = t.shape().to_vec();
    shape[0] = rows.len();
    Tensor::new(shape, data)
}
